//! Model files on disk: the versioned binary codec lives in core, this is
//! just the file plumbing around it.

use std::path::Path;

use gauntlet_core::ngram::{decode_model, encode_model, ModelCodecError, NGramModel};

#[derive(Debug, thiserror::Error)]
pub enum ModelIoError {
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("{path}: {cause}")]
    Codec { path: std::path::PathBuf, cause: ModelCodecError },
}

pub fn save_model(model: &NGramModel, path: &Path) -> Result<(), ModelIoError> {
    std::fs::write(path, encode_model(model))
        .map_err(|e| ModelIoError::Io { path: path.to_path_buf(), source: e })
}

pub fn load_model(path: &Path) -> Result<NGramModel, ModelIoError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ModelIoError::Io { path: path.to_path_buf(), source: e })?;
    decode_model(&bytes).map_err(|e| ModelIoError::Codec { path: path.to_path_buf(), cause: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let model = NGramModel {
            n: 4,
            num_buckets: 64,
            bias: -0.25,
            weights: (0..64).map(|i| i as f64 * 0.5).collect(),
            seed: 99,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&model, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
    }

    #[test]
    fn corrupt_files_carry_the_path_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"SUBNG1 but then garbage").unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("junk.bin"));
    }
}
