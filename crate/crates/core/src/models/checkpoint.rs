//! `GMD1` checkpoints: magic, u32 LE header length, JSON header, then the
//! parameter blocks as row-major f32 LE in header order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, Model, ModelKind, StudentModel, TeacherModel};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GMD1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub n_users: usize,
    pub n_items: usize,
    pub d: usize,
    pub n_layers: usize,
    pub seed: u64,
    pub blocks: Vec<BlockSpec>,
}

pub fn save_checkpoint(path: &Path, model: &Model, seed: u64) -> Result<()> {
    let rec = model.as_recommender();
    let n_layers = match model {
        Model::Teacher(t) => t.n_layers,
        Model::Student(_) => 0,
    };
    let blocks = rec
        .param_names()
        .into_iter()
        .zip(rec.params())
        .map(|(name, p)| BlockSpec {
            name: name.to_string(),
            rows: p.nrows(),
            cols: p.ncols(),
        })
        .collect();
    let header = CheckpointHeader {
        kind: rec.kind(),
        n_users: rec.n_users(),
        n_items: rec.n_items(),
        d: rec.dim(),
        n_layers,
        seed,
        blocks,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in rec.params() {
        for v in p.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint. Teachers with layers come back without an adjacency;
/// attach one built from the same train split before scoring.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a GMD1 file", path.display())));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8 + hlen;
    if bytes.len() < header_end {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..header_end])?;
    let mut offset = header_end;
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for spec in &header.blocks {
        let n = spec.rows * spec.cols;
        let end = offset + 4 * n;
        if bytes.len() < end {
            return Err(Error::Checkpoint(format!("truncated block `{}`", spec.name)));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        blocks.push(Array2::from_shape_vec((spec.rows, spec.cols), data).expect("sized"));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last block".into()));
    }
    let names: Vec<&str> = header.blocks.iter().map(|b| b.name.as_str()).collect();
    let mut it = blocks.into_iter();
    let model = match header.kind {
        ModelKind::Teacher => {
            if names != ["user_emb", "item_emb"] {
                return Err(Error::Checkpoint(format!("teacher blocks {names:?}")));
            }
            Model::Teacher(TeacherModel {
                user_emb: EmbeddingTable { matrix: it.next().unwrap() },
                item_emb: EmbeddingTable { matrix: it.next().unwrap() },
                n_layers: header.n_layers,
                adjacency: None,
            })
        }
        ModelKind::Student => {
            if names != ["user_emb", "item_id_emb", "proj_text", "proj_vision"] {
                return Err(Error::Checkpoint(format!("student blocks {names:?}")));
            }
            Model::Student(StudentModel {
                user_emb: EmbeddingTable { matrix: it.next().unwrap() },
                item_id_emb: EmbeddingTable { matrix: it.next().unwrap() },
                proj_text: it.next().unwrap(),
                proj_vision: it.next().unwrap(),
            })
        }
    };
    Ok((model, header))
}
