//! JSON Lines dataset and prediction records.

use std::io::{BufRead, BufReader};
use std::path::Path;

use hashprint::featurizer::{Content, ImageData, Modality, Sample};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl SampleRecord {
    pub fn from_sample(s: &Sample) -> Self {
        let (modality, text, image) = match &s.content {
            Content::Text(t) => (Modality::Text, Some(t.clone()), None),
            Content::Image(img) => (
                Modality::Image,
                None,
                Some(ImageRecord {
                    width: img.width,
                    height: img.height,
                    pixels: img.pixels.clone(),
                }),
            ),
        };
        Self {
            id: s.id.clone(),
            modality,
            text,
            image,
            label: s.label.clone(),
        }
    }

    pub fn into_sample(self) -> Result<Sample, String> {
        let content = match (self.modality, self.text, self.image) {
            (Modality::Text, Some(t), None) => Content::Text(t),
            (Modality::Image, None, Some(img)) => Content::Image(
                ImageData::new(img.width, img.height, img.pixels).map_err(|e| format!("record {}: {e}", self.id))?,
            ),
            (m, _, _) => {
                return Err(format!(
                    "record {}: exactly one of text/image must be present and match modality {m:?}",
                    self.id
                ))
            }
        };
        Ok(Sample {
            id: self.id,
            content,
            label: self.label,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub label: String,
    pub confidence: f64,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>, CliError> {
    read_lines::<SampleRecord>(path)?
        .into_iter()
        .map(|r| r.into_sample().map_err(CliError::data))
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, CliError> {
    read_lines(path)
}

pub fn to_jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r).expect("records serialize");
        out.push(b'\n');
    }
    out
}
