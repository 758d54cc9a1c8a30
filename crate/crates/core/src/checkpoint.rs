//! On-disk model checkpoints.
//!
//! A checkpoint directory holds `manifest.txt` (one `name dtype shape` line
//! per array, in visit order), one little-endian f32 blob per array under
//! `tensors/`, `model.toml` with the full model config, and the BPE models
//! as `target.bpe` (plus `source.bpe` for the token front-end).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::segmentation::BpeModel;
use crate::tensor::{DenseArray, Params};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "model.toml";
pub const TENSORS: &str = "tensors";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Parameters are narrowed to f32 on save.
pub fn save(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let tensors = dir.join(TENSORS);
    fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    let mut manifest = String::new();
    let mut result = Ok(());
    model.params.visit("", &mut |name, a, _| {
        if result.is_err() {
            return;
        }
        if !a.is_finite() {
            result = Err(Error::invalid(format!("refusing to save non-finite array {name}")));
            return;
        }
        let _ = writeln!(manifest, "{name} f32 {}", shape_str(&a.shape));
        let bytes: Vec<u8> = a.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        result = write(&tensors.join(format!("{name}.bin")), &bytes);
    });
    result?;
    write(&dir.join(MANIFEST), manifest.as_bytes())?;
    let config = toml::to_string(&model.config).map_err(|e| Error::parse(e.to_string()))?;
    write(&dir.join(CONFIG), config.as_bytes())?;
    model.target.save(dir.join("target.bpe"))?;
    if let Some(src) = model.source_bpe() {
        src.save(dir.join("source.bpe"))?;
    }
    Ok(())
}

pub fn load(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let config_text = String::from_utf8(read(&dir.join(CONFIG))?).map_err(|e| Error::parse(e.to_string()))?;
    let config: ModelConfig = toml::from_str(&config_text).map_err(|e| Error::parse(e.to_string()))?;
    let target = BpeModel::load(dir.join("target.bpe"))?;
    let source_path = dir.join("source.bpe");
    let source = if source_path.exists() {
        Some(BpeModel::load(&source_path)?)
    } else {
        None
    };
    let mut model = Model::assemble(config, source, target, None)?;

    let manifest_path = dir.join(MANIFEST);
    let manifest = String::from_utf8(read(&manifest_path)?).map_err(|e| Error::parse(e.to_string()))?;
    let mut entries = Vec::new();
    for (n, line) in manifest.lines().enumerate() {
        let parts: Vec<&str> = line.split(' ').collect();
        let [name, dtype, shape] = parts[..] else {
            return Err(Error::parse(format!(
                "{}:{}: expected `name dtype shape`",
                manifest_path.display(),
                n + 1
            )));
        };
        if dtype != "f32" {
            return Err(Error::parse(format!("unsupported dtype {dtype} for {name}")));
        }
        let shape: Vec<usize> = shape
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::parse(format!("bad shape for {name}"))))
            .collect::<Result<_>>()?;
        entries.push((name.to_string(), shape));
    }
    let expected = model.params.names();
    if expected.len() != entries.len() || expected.iter().zip(&entries).any(|(a, b)| *a != b.0) {
        return Err(Error::invalid(format!(
            "{} does not match the configured architecture",
            manifest_path.display()
        )));
    }

    let mut i = 0;
    let mut result = Ok(());
    model.params.visit_mut("", &mut |name, a, _| {
        if result.is_err() {
            return;
        }
        let (_, shape) = &entries[i];
        i += 1;
        result = (|| {
            if *shape != a.shape {
                return Err(Error::shape(format!(
                    "{name}: checkpoint {shape:?}, model {:?}",
                    a.shape
                )));
            }
            let bytes = read(&dir.join(TENSORS).join(format!("{name}.bin")))?;
            if bytes.len() != a.len() * 4 {
                return Err(Error::shape(format!("{name}: blob has {} bytes", bytes.len())));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            *a = DenseArray::from_vec(shape, data)?;
            Ok(())
        })();
    });
    result?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FrontendConfig;

    fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in [dir.to_path_buf(), dir.join(TENSORS)] {
            let mut names: Vec<_> = fs::read_dir(&sub).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for p in names.into_iter().filter(|p| p.is_file()) {
                out.push((
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
        out
    }

    #[test]
    fn load_and_resave_is_byte_identical() {
        for frontend in [FrontendConfig::default(), FrontendConfig::Bpe { merges: 4 }] {
            let cfg = ModelConfig {
                layers: 1,
                heads: 2,
                d_model: 8,
                d_ff: 8,
                target_merges: 4,
                frontend,
                ..Default::default()
            };
            let model = Model::new(cfg, &["ab ba", "b"], &["xy", "yx x"]).unwrap();
            let tmp = tempfile::tempdir().unwrap();
            let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
            save(&model, &a).unwrap();
            let loaded = load(&a).unwrap();
            save(&loaded, &b).unwrap();
            assert_eq!(files(&a), files(&b));
            assert_eq!(loaded.config, model.config);
            // values survive up to f32 rounding
            let mut worst = 0.0f64;
            let mut orig = Vec::new();
            model.params.visit("", &mut |_, a, _| orig.extend_from_slice(&a.data));
            let mut j = 0;
            loaded.params.visit("", &mut |_, a, _| {
                for v in &a.data {
                    worst = worst.max((v - orig[j]).abs());
                    j += 1;
                }
            });
            assert!(worst < 1e-6);
            assert_eq!(load(&b).unwrap().params, loaded.params);
        }
    }

    #[test]
    fn rejects_tampering() {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 8,
            target_merges: 2,
            frontend: FrontendConfig::Bpe { merges: 2 },
            ..Default::default()
        };
        let model = Model::new(cfg, &["ab"], &["xy"]).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save(&model, tmp.path()).unwrap();
        let blob = tmp.path().join(TENSORS).join("output.bias.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes.pop();
        fs::write(&blob, bytes).unwrap();
        assert!(load(tmp.path()).is_err());
        fs::write(tmp.path().join(MANIFEST), "junk\n").unwrap();
        assert!(load(tmp.path()).is_err());
    }
}
