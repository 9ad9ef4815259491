//! Dialogue records in an AVSD-style JSON layout.
//!
//! ```json
//! [{
//!   "id": "video_0001",
//!   "caption": "a woman gets a carton out of the fridge .",
//!   "summary": "one person pours something ...",
//!   "dialog": [{"question": "does she say anything ?", "answer": "no ."}],
//!   "visual_features": "features/video_0001_visual.dmnf",
//!   "audio_features": "features/video_0001_audio.dmnf"
//! }]
//! ```
//!
//! Feature paths are resolved against the directory holding the JSON file.
//! The last entry of `dialog` is the question to be answered; earlier
//! entries are its history.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::data::features;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaPair {
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueExample {
    pub id: String,
    pub caption: Vec<String>,
    pub summary: Vec<String>,
    pub qa_pairs: Vec<QaPair>,
    pub visual_features_ref: PathBuf,
    pub audio_features_ref: PathBuf,
}

impl DialogueExample {
    pub fn all_tokens(&self) -> impl Iterator<Item = &String> {
        self.caption
            .iter()
            .chain(&self.summary)
            .chain(self.qa_pairs.iter().flat_map(|qa| qa.question.iter().chain(&qa.answer)))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "id": self.id,
            "caption": self.caption.join(" "),
            "summary": self.summary.join(" "),
            "dialog": self.qa_pairs.iter().map(|qa| json!({
                "question": qa.question.join(" "),
                "answer": qa.answer.join(" "),
            })).collect::<Vec<_>>(),
            "visual_features": self.visual_features_ref.to_string_lossy(),
            "audio_features": self.audio_features_ref.to_string_lossy(),
        })
    }
}

const TERMINAL_PUNCT: &[char] = &['.', ',', '?', '!', ';', ':'];

/// Lowercase, split on whitespace, and split trailing punctuation into
/// separate tokens. Idempotent on its own output joined by spaces.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let stem = word.trim_end_matches(TERMINAL_PUNCT);
        if !stem.is_empty() {
            out.push(stem.to_string());
        }
        out.extend(word[stem.len()..].chars().map(String::from));
    }
    out
}

fn text_field(obj: &Map<String, Value>, record: usize, field: &str) -> Result<String> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Error::Record {
            record,
            field: field.into(),
            message: "expected a string".into(),
        }),
        None => Err(Error::Record {
            record,
            field: field.into(),
            message: "missing".into(),
        }),
    }
}

fn parse_record(value: &Value, record: usize, base: &Path) -> Result<DialogueExample> {
    let obj = value.as_object().ok_or_else(|| Error::Record {
        record,
        field: "<record>".into(),
        message: "expected an object".into(),
    })?;
    let id = text_field(obj, record, "id")?;
    let caption = tokenize(&text_field(obj, record, "caption")?);
    let summary = tokenize(&text_field(obj, record, "summary")?);
    let dialog = obj
        .get("dialog")
        .ok_or_else(|| Error::Record {
            record,
            field: "dialog".into(),
            message: "missing".into(),
        })?
        .as_array()
        .ok_or_else(|| Error::Record {
            record,
            field: "dialog".into(),
            message: "expected an array".into(),
        })?;
    if dialog.is_empty() {
        return Err(Error::Record {
            record,
            field: "dialog".into(),
            message: "needs at least one question/answer pair".into(),
        });
    }
    let qa_pairs = dialog
        .iter()
        .enumerate()
        .map(|(turn, qa)| {
            let qa = qa.as_object().ok_or_else(|| Error::Record {
                record,
                field: format!("dialog[{turn}]"),
                message: "expected an object".into(),
            })?;
            let question = tokenize(&text_field(qa, record, "question")?);
            if question.is_empty() {
                return Err(Error::Record {
                    record,
                    field: format!("dialog[{turn}].question"),
                    message: "empty question".into(),
                });
            }
            Ok(QaPair {
                question,
                answer: tokenize(&text_field(qa, record, "answer")?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let visual_features_ref = base.join(text_field(obj, record, "visual_features")?);
    let audio_features_ref = base.join(text_field(obj, record, "audio_features")?);
    for p in [&visual_features_ref, &audio_features_ref] {
        features::validate(p)?;
    }
    Ok(DialogueExample {
        id,
        caption,
        summary,
        qa_pairs,
        visual_features_ref,
        audio_features_ref,
    })
}

fn base_dir(path: &Path) -> Result<PathBuf> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    parent.canonicalize().map_err(|e| Error::Resolution {
        path: parent.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Parse dialogues from JSON text; relative feature paths resolve against `base`.
pub fn parse_dialogues(text: &str, base: &Path) -> Result<Vec<DialogueExample>> {
    let value: Value = serde_json::from_str(text)?;
    let records = value
        .as_array()
        .ok_or_else(|| Error::Format("dialogue file must hold a JSON array".into()))?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| parse_record(r, i, base))
        .collect()
}

/// Load and validate a dialogue file. Feature references come back as
/// absolute paths, so serializing and reloading is an identity.
pub fn load_dialogues(path: &Path) -> Result<Vec<DialogueExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Resolution {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_dialogues(&text, &base_dir(path)?)
}

pub fn serialize_dialogues(dialogues: &[DialogueExample]) -> Result<String> {
    let arr: Vec<Value> = dialogues.iter().map(DialogueExample::to_json).collect();
    Ok(serde_json::to_string_pretty(&arr)?)
}

pub fn save_dialogues(dialogues: &[DialogueExample], path: &Path) -> Result<()> {
    fs::write(path, serialize_dialogues(dialogues)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn write_features(dir: &Path) {
        let t = Tensor::matrix(2, 3, vec![0.5; 6]).unwrap();
        features::save_features(&t, &dir.join("v.dmnf")).unwrap();
        features::save_features(&t, &dir.join("a.dmnf")).unwrap();
    }

    fn table_one() -> Value {
        let qa = [
            ("does she enter the room or was she already there ?", "she is there, i think she starts the camera and then walks toward the fridge ."),
            ("does she get anything out of the fridge ?", "she gets out a carton of something ."),
            ("does she say anything ?", "no , she is silent the entire time ."),
            ("does she get a cup ?", "the glass is already on the counter ."),
            ("does she eat or drink anything ?", "she takes a sip of the drink while walking back to her computer ."),
            ("does she pour what was in the carton into something ?", "yes she pours a tiny amount into the glass ."),
            ("does she put the carton back in the fridge then ?", "yes , she puts it back and then picks up the cup ."),
            ("does she smile or have any emotion ?", "no , but she does look back at the camera a few times ."),
            ("does she ever mess with the tons of bananas on her counter ?", "no , but she does turn the computer / camera around as she sits down at a table at the end ."),
        ];
        json!([{
            "id": "table1",
            "caption": "a women gets a carton out of the fridge , pours some in a glass , and puts the carton back before sitting down .",
            "summary": "one person pours something from a refrigerator , then sits at a desk and starts working .",
            "dialog": qa.iter().map(|(q, a)| json!({"question": q, "answer": a})).collect::<Vec<_>>(),
            "visual_features": "v.dmnf",
            "audio_features": "a.dmnf",
        }])
    }

    #[test]
    fn tokenizer_splits_trailing_punctuation() {
        assert_eq!(
            tokenize("She is there, I think."),
            vec!["she", "is", "there", ",", "i", "think", "."]
        );
        assert_eq!(tokenize("what?!"), vec!["what", "?", "!"]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
        assert_eq!(tokenize("camera / computer"), vec!["camera", "/", "computer"]);
    }

    proptest! {
        #[test]
        fn tokenizer_is_idempotent(text in "[a-zA-Z.,?! ]{0,40}") {
            let once = tokenize(&text);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }
    }

    #[test]
    fn empty_array_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        fs::write(&p, "[]").unwrap();
        assert!(load_dialogues(&p).unwrap().is_empty());
    }

    #[test]
    fn missing_summary_names_field() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path());
        let mut v = table_one();
        v[0].as_object_mut().unwrap().remove("summary");
        let p = dir.path().join("d.json");
        fs::write(&p, v.to_string()).unwrap();
        match load_dialogues(&p) {
            Err(Error::Record { record, field, .. }) => {
                assert_eq!(record, 0);
                assert_eq!(field, "summary");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_feature_file_is_resolution_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        fs::write(&p, table_one().to_string()).unwrap();
        assert!(matches!(load_dialogues(&p), Err(Error::Resolution { .. })));
    }

    #[test]
    fn table_one_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path());
        let p = dir.path().join("d.json");
        fs::write(&p, table_one().to_string()).unwrap();
        let first = load_dialogues(&p).unwrap();
        assert_eq!(first[0].qa_pairs.len(), 9);
        assert_eq!(&first[0].qa_pairs[0].answer[..4], &["she", "is", "there", ","]);
        let p2 = dir.path().join("d2.json");
        save_dialogues(&first, &p2).unwrap();
        let second = load_dialogues(&p2).unwrap();
        assert_eq!(first, second);
    }
}
