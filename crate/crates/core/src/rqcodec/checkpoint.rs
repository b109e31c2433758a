//! Codebook checkpoints: one line of JSON header, then the centroids as a
//! little-endian `f32` blob in level-major, entry-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::TrainConfig;
use super::CodebookStack;
use crate::error::{Error, Result};
use crate::vector::Matrix;

pub const CHECKPOINT_FORMAT: &str = "semrank-codebook/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub levels: usize,
    pub dim: usize,
    pub codebook_sizes: Vec<usize>,
    pub seed: u64,
    pub config: Option<TrainConfig>,
}

/// A codebook stack with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stack: CodebookStack,
    pub seed: u64,
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_owned(),
            levels: self.stack.num_levels(),
            dim: self.stack.dim(),
            codebook_sizes: self.stack.codebook_sizes(),
            seed: self.seed,
            config: self.config.clone(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<checkpoint>", e);
        serde_json::to_writer(&mut w, &self.header())?;
        w.write_all(b"\n").map_err(io)?;
        for level in self.stack.levels() {
            for v in level.centroids().as_flat() {
                w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {:?}",
                header.format
            )));
        }
        if header.codebook_sizes.len() != header.levels || header.dim == 0 {
            return Err(Error::Format("inconsistent checkpoint header".into()));
        }
        let mut levels = Vec::with_capacity(header.levels);
        let mut buf = [0u8; 4];
        for &c in &header.codebook_sizes {
            let mut data = Vec::with_capacity(c * header.dim);
            for _ in 0..c * header.dim {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format("truncated checkpoint blob".into()))?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            levels.push(Matrix::from_flat(header.dim, data)?);
        }
        if r.read(&mut buf).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint blob".into()));
        }
        Ok(Self {
            stack: CodebookStack::from_centroids(levels)?,
            seed: header.seed,
            config: header.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read(&b"not json\n"[..]).is_err());
        let header = r#"{"format":"semrank-codebook/1","levels":1,"dim":2,"codebook_sizes":[2],"seed":0,"config":null}"#;
        let mut bytes = format!("{header}\n").into_bytes();
        bytes.extend_from_slice(&[0u8; 12]);
        assert!(matches!(Checkpoint::read(&bytes[..]), Err(Error::Format(_))));
        bytes.extend_from_slice(&[0u8; 4]);
        assert!(Checkpoint::read(&bytes[..]).is_ok());
        bytes.push(1);
        assert!(Checkpoint::read(&bytes[..]).is_err());
    }
}
