use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::network::{AttentionBundle, AttentionLayout};
use super::FusionError;
use crate::tensorcore::Real;

/// Text-token rows by image-token columns of head-averaged attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTable {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl HeatmapTable {
    /// Tab-separated, header row of image labels, one line per text token.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("token");
        for c in &self.col_labels {
            out.push('\t');
            out.push_str(&sanitize(c));
        }
        out.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            out.push_str(&sanitize(label));
            for v in row {
                let _ = write!(out, "\t{v:.9}");
            }
            out.push('\n');
        }
        out
    }
}

fn sanitize(label: &str) -> String {
    label.replace(['\t', '\n', '\r'], " ")
}

/// Exports the last attention layer. For F3 the text rows are restricted
/// to the visual-prefix columns and renormalized, so each row is the
/// distribution of a text token's attention over the prefix alone.
pub fn export_attention<T: Real>(
    bundle: &AttentionBundle<T>,
    text_labels: &[String],
    image_labels: &[String],
) -> Result<HeatmapTable, FusionError> {
    let last = bundle
        .layers
        .last()
        .ok_or_else(|| FusionError::Export("bundle has no layers".into()))?;
    let avg = last.head_average();
    let (text_len, image_len) = match bundle.layout {
        AttentionLayout::Cross {
            text_len,
            image_len,
        } => (text_len, image_len),
        AttentionLayout::Prefix {
            prefix_len,
            text_len,
        } => (text_len, prefix_len),
    };
    if text_labels.len() != text_len || image_labels.len() != image_len {
        return Err(FusionError::Export(format!(
            "labels {}x{} do not match map {}x{}",
            text_labels.len(),
            image_labels.len(),
            text_len,
            image_len
        )));
    }
    let values = match bundle.layout {
        AttentionLayout::Cross { .. } => (0..text_len)
            .map(|r| avg.row(r).iter().map(|v| v.as_f64()).collect())
            .collect(),
        AttentionLayout::Prefix { prefix_len, .. } => (0..text_len)
            .map(|r| {
                let row = &avg.row(prefix_len + r)[..prefix_len];
                let total: f64 = row.iter().map(|v| v.as_f64()).sum();
                row.iter().map(|v| v.as_f64() / total).collect()
            })
            .collect(),
    };
    Ok(HeatmapTable {
        row_labels: text_labels.to_vec(),
        col_labels: image_labels.to_vec(),
        values,
    })
}
