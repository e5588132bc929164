//! On-disk corpus layout.
//!
//! `corpus.json` holds the generator config, split and per-instance metadata
//! (latent vector, attribute sets, caption). `feats.bin` holds the features:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RBVL"
//! 4       4     version, u32 LE (currently 1)
//! 8       8     n_instances, u64 LE
//! 16      8     image_tokens L_I, u64 LE
//! 24      8     text_tokens L_T, u64 LE
//! 32      8     d_feat, u64 LE
//! 40      ...   image features, f64 LE, instance-major, then row-major L_I×d_feat
//! ...     ...   text features, f64 LE, same order, L_T×d_feat each
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, GeneratorConfig, Split, SyntheticInstance};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FEATS_MAGIC: &[u8; 4] = b"RBVL";
pub const FEATS_VERSION: u32 = 1;
const HEADER_LEN: usize = 40;

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    format_version: u32,
    config: GeneratorConfig,
    split: Split,
    instances: Vec<SyntheticInstance>,
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = CorpusFile {
        format_version: FEATS_VERSION,
        config: corpus.config.clone(),
        split: corpus.split.clone(),
        instances: corpus.instances.clone(),
    };
    fs::write(dir.join("corpus.json"), serde_json::to_vec_pretty(&file)?)?;

    let c = &corpus.config;
    let mut w = BufWriter::new(fs::File::create(dir.join("feats.bin"))?);
    w.write_all(FEATS_MAGIC)?;
    w.write_all(&FEATS_VERSION.to_le_bytes())?;
    for n in [c.n_instances, c.image_tokens, c.text_tokens, c.d_feat] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for modality in [super::Modality::Image, super::Modality::Text] {
        for inst in &corpus.instances {
            for v in inst.feats(modality).data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let json_path = dir.join("corpus.json");
    let file: CorpusFile = serde_json::from_slice(&fs::read(&json_path)?)?;
    let feats_path = dir.join("feats.bin");
    let bytes = fs::read(&feats_path)?;
    let bad = |detail: String| Error::Format {
        path: feats_path.display().to_string(),
        detail,
    };

    if bytes.len() < HEADER_LEN || &bytes[..4] != FEATS_MAGIC {
        return Err(bad("missing RBVL header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATS_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let field = |i: usize| {
        let at = 8 + 8 * i;
        u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
    };
    let (n, li, lt, d) = (field(0), field(1), field(2), field(3));
    let c = &file.config;
    if (n, li, lt, d) != (c.n_instances, c.image_tokens, c.text_tokens, c.d_feat)
        || file.instances.len() != n
    {
        return Err(bad("header counts disagree with corpus.json".into()));
    }
    let expected = HEADER_LEN + 8 * n * (li + lt) * d;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }

    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut instances = file.instances;
    for inst in instances.iter_mut() {
        let data: Vec<f64> = floats.by_ref().take(li * d).collect();
        inst.image_feats = Some(Tensor::matrix(li, d, data)?);
    }
    for inst in instances.iter_mut() {
        let data: Vec<f64> = floats.by_ref().take(lt * d).collect();
        inst.text_feats = Some(Tensor::matrix(lt, d, data)?);
    }
    file.config.validate()?;
    Corpus::from_parts(file.config, instances, file.split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate;

    #[test]
    fn round_trip_is_exact_and_bytes_are_stable() {
        let corpus = generate(&GeneratorConfig::imbalanced(30, 7)).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_corpus(&corpus, a.path()).unwrap();
        save_corpus(&generate(&corpus.config).unwrap(), b.path()).unwrap();
        for f in ["corpus.json", "feats.bin"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap()
            );
        }
        let loaded = load_corpus(a.path()).unwrap();
        assert_eq!(loaded, corpus);
        assert_eq!(
            loaded.oracle_embedding(&loaded.instances[2], crate::corpus::Modality::Image).unwrap(),
            corpus.oracle_embedding(&corpus.instances[2], crate::corpus::Modality::Image).unwrap()
        );
    }

    #[test]
    fn truncated_feats_are_rejected() {
        let corpus = generate(&GeneratorConfig::imbalanced(5, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let p = dir.path().join("feats.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Format { .. })));
    }
}
