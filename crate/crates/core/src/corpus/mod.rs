//! Seeded paired image/text corpus with a controllable modality gap.
//!
//! Each instance draws a small attribute set. Its latent vector `z` is the
//! sum of the attributes' latent codes. The text view sees every attribute
//! with low noise. The image view loses each attribute with probability
//! `drop_rate_image` and carries heavier noise, so text is the strong
//! modality under the default preset.

mod io;
mod lexicon;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use io::{load_corpus, save_corpus, FEATS_MAGIC, FEATS_VERSION};
pub use lexicon::{default_lexicon, filler_tokens, AttributeWords, CAPTION_PREFIX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Image is the weak modality; requires `sigma_image ≥ sigma_text ≥ 0`.
    Imbalanced,
    /// Both views carry the same attribute information.
    Balanced,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub preset: Preset,
    pub n_instances: usize,
    pub d_latent: usize,
    pub d_feat: usize,
    /// Output dimension of [`Corpus::oracle_embedding`].
    pub oracle_dim: usize,
    pub vocab: Vec<AttributeWords>,
    pub attrs_per_instance: usize,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub sigma_image: f64,
    pub sigma_text: f64,
    pub drop_rate_image: f64,
    /// The last `text_only_attributes` vocabulary entries never appear in the
    /// image view (concepts that cannot be depicted).
    pub text_only_attributes: usize,
    /// Probability a caption keeps the canonical attribute word.
    pub canonical_word_prob: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::imbalanced(2000, 0)
    }
}

impl GeneratorConfig {
    /// Text strong, image weak.
    pub fn imbalanced(n_instances: usize, seed: u64) -> Self {
        Self {
            preset: Preset::Imbalanced,
            n_instances,
            d_latent: 16,
            d_feat: 32,
            oracle_dim: 32,
            vocab: default_lexicon(),
            attrs_per_instance: 3,
            image_tokens: 16,
            text_tokens: 12,
            sigma_image: 0.5,
            sigma_text: 0.1,
            drop_rate_image: 0.3,
            text_only_attributes: 16,
            canonical_word_prob: 0.5,
            train_fraction: 0.7,
            val_fraction: 0.15,
            seed,
        }
    }

    /// Noise-free control: no dropout, no noise on either view.
    pub fn balanced(n_instances: usize, seed: u64) -> Self {
        Self {
            preset: Preset::Balanced,
            sigma_image: 0.0,
            sigma_text: 0.0,
            drop_rate_image: 0.0,
            text_only_attributes: 0,
            ..Self::imbalanced(n_instances, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.vocab.len() < self.attrs_per_instance {
            return cfg(format!(
                "vocabulary has {} attributes but {} are drawn per instance",
                self.vocab.len(),
                self.attrs_per_instance
            ));
        }
        if self.attrs_per_instance == 0 {
            return cfg("attrs_per_instance must be positive".into());
        }
        if self.n_instances == 0 || self.d_latent == 0 || self.d_feat == 0 || self.oracle_dim == 0
        {
            return cfg("counts and dimensions must be positive".into());
        }
        if self.image_tokens == 0 || self.text_tokens == 0 {
            return cfg("token counts must be positive".into());
        }
        if self.text_only_attributes >= self.vocab.len() {
            return cfg("at least one attribute must be visible in images".into());
        }
        if !(0.0..1.0).contains(&self.drop_rate_image) {
            return cfg(format!("drop_rate_image {} outside [0,1)", self.drop_rate_image));
        }
        if !(0.0..=1.0).contains(&self.canonical_word_prob) {
            return cfg("canonical_word_prob outside [0,1]".into());
        }
        if self.sigma_image < 0.0 || self.sigma_text < 0.0 {
            return cfg("noise levels must be non-negative".into());
        }
        if self.preset == Preset::Imbalanced && self.sigma_image < self.sigma_text {
            return cfg(format!(
                "imbalanced preset needs sigma_image ≥ sigma_text, got {} < {}",
                self.sigma_image, self.sigma_text
            ));
        }
        if self.preset == Preset::Balanced
            && (self.sigma_image != self.sigma_text
                || self.drop_rate_image != 0.0
                || self.text_only_attributes != 0)
        {
            return cfg("balanced preset needs equal noise and no image dropout".into());
        }
        let f = self.train_fraction + self.val_fraction;
        if self.train_fraction <= 0.0 || self.val_fraction < 0.0 || f >= 1.0 {
            return cfg("split fractions must leave a non-empty test split".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInstance {
    pub id: usize,
    pub z: Vec<f64>,
    /// Sorted attribute ids.
    pub attributes: Vec<usize>,
    /// Attributes that survived image dropout, sorted.
    pub image_attributes: Vec<usize>,
    pub caption: Vec<String>,
    #[serde(skip)]
    pub image_feats: Option<Tensor>,
    #[serde(skip)]
    pub text_feats: Option<Tensor>,
}

impl SyntheticInstance {
    pub fn feats(&self, modality: Modality) -> &Tensor {
        let f = match modality {
            Modality::Image => &self.image_feats,
            Modality::Text => &self.text_feats,
        };
        f.as_ref().expect("features are attached by generate/load")
    }

    pub fn caption_text(&self) -> String {
        self.caption.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Fixed random maps shared by every instance, re-derived from the seed.
#[derive(Clone, Debug)]
struct Bases {
    /// Latent code per attribute, `n_attr × d_latent`.
    latent: Tensor,
    /// Feature-space embedding per attribute, `n_attr × d_feat`.
    image: Tensor,
    text: Tensor,
    /// Noiseless `d_latent → oracle_dim` maps.
    oracle_image: Tensor,
    oracle_text: Tensor,
}

const STREAM_BASES: u64 = 0;
const STREAM_INSTANCES: u64 = 1;
const STREAM_SPLIT: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Bases {
    fn derive(cfg: &GeneratorConfig) -> Result<Self> {
        let mut rng = stream(cfg.seed, STREAM_BASES);
        let n_attr = cfg.vocab.len();
        let latent = Tensor::randn(&[n_attr, cfg.d_latent], (cfg.d_latent as f64).powf(-0.5), &mut rng);
        let mix = |rng: &mut ChaCha8Rng| {
            Tensor::randn(&[cfg.d_latent, cfg.d_feat], (cfg.d_latent as f64).powf(-0.5), rng)
        };
        let image_map = mix(&mut rng);
        let text_map = mix(&mut rng);
        let image = latent.matmul(&image_map)?.normalize_rows()?;
        let text = latent.matmul(&text_map)?.normalize_rows()?;
        let oracle_image = Tensor::randn(&[cfg.d_latent, cfg.oracle_dim], 1.0, &mut rng);
        let oracle_text = Tensor::randn(&[cfg.d_latent, cfg.oracle_dim], 1.0, &mut rng);
        Ok(Self {
            latent,
            image,
            text,
            oracle_image,
            oracle_text,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: GeneratorConfig,
    pub instances: Vec<SyntheticInstance>,
    pub split: Split,
    bases: Bases,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.instances == other.instances
            && self.split == other.split
            && self
                .instances
                .iter()
                .zip(&other.instances)
                .all(|(a, b)| a.image_feats == b.image_feats && a.text_feats == b.text_feats)
    }
}

/// Builds a deterministic corpus from `config` (including its seed).
pub fn generate(config: &GeneratorConfig) -> Result<Corpus> {
    config.validate()?;
    let bases = Bases::derive(config)?;
    let mut rng = stream(config.seed, STREAM_INSTANCES);
    let n_attr = config.vocab.len();
    let n_visible = n_attr - config.text_only_attributes;

    let mut instances = Vec::with_capacity(config.n_instances);
    for id in 0..config.n_instances {
        let mut attributes =
            rand::seq::index::sample(&mut rng, n_attr, config.attrs_per_instance).into_vec();
        attributes.sort_unstable();

        let image_attributes: Vec<usize> = attributes
            .iter()
            .copied()
            .filter(|&a| rng.random::<f64>() >= config.drop_rate_image && a < n_visible)
            .collect();

        let mut z = vec![0.0; config.d_latent];
        for &a in &attributes {
            z.iter_mut()
                .zip(bases.latent.row(a))
                .for_each(|(z, v)| *z += v);
        }

        let caption = caption_for(config, &attributes, &mut rng);
        let image_feats = render(
            &bases.image,
            &image_attributes,
            config.image_tokens,
            config.sigma_image,
            &mut rng,
        );
        let text_feats = render(
            &bases.text,
            &attributes,
            config.text_tokens,
            config.sigma_text,
            &mut rng,
        );
        instances.push(SyntheticInstance {
            id,
            z,
            attributes,
            image_attributes,
            caption,
            image_feats: Some(image_feats),
            text_feats: Some(text_feats),
        });
    }

    let split = make_split(config);
    Ok(Corpus {
        config: config.clone(),
        instances,
        split,
        bases,
    })
}

fn make_split(config: &GeneratorConfig) -> Split {
    let mut rng = stream(config.seed, STREAM_SPLIT);
    let mut order: Vec<usize> = (0..config.n_instances).collect();
    order.shuffle(&mut rng);
    let n = config.n_instances as f64;
    let n_train = ((n * config.train_fraction).round() as usize).max(1);
    let n_val = (n * config.val_fraction).round() as usize;
    let n_val = n_val.min(config.n_instances.saturating_sub(n_train + 1));
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Split { train, val, test }
}

fn caption_for<R: Rng>(config: &GeneratorConfig, attributes: &[usize], rng: &mut R) -> Vec<String> {
    let mut tokens: Vec<String> = CAPTION_PREFIX.iter().map(|s| (*s).to_string()).collect();
    for &a in attributes {
        let words = &config.vocab[a];
        tokens.push(words.connector.clone());
        let keep = words.synonyms.is_empty() || rng.random::<f64>() < config.canonical_word_prob;
        let w = if keep {
            &words.word
        } else {
            &words.synonyms[rng.random_range(0..words.synonyms.len())]
        };
        tokens.push(w.clone());
    }
    tokens
}

/// Token `l` carries attribute `attrs[l mod |attrs|]` plus isotropic noise;
/// with no attributes every token is pure noise.
fn render<R: Rng>(basis: &Tensor, attrs: &[usize], n_tokens: usize, sigma: f64, rng: &mut R) -> Tensor {
    let d = basis.cols();
    let mut data = Tensor::randn(&[n_tokens, d], sigma, rng).into_data();
    if !attrs.is_empty() {
        for l in 0..n_tokens {
            let a = attrs[l % attrs.len()];
            data[l * d..(l + 1) * d]
                .iter_mut()
                .zip(basis.row(a))
                .for_each(|(x, b)| *x += b);
        }
    }
    Tensor::from_parts(vec![n_tokens, d], data)
}

impl Corpus {
    pub fn split_ids(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.split.train,
            SplitName::Val => &self.split.val,
            SplitName::Test => &self.split.test,
        }
    }

    pub fn instance(&self, id: usize) -> &SyntheticInstance {
        &self.instances[id]
    }

    /// Noiseless linear map of `z`, unit-normalized. Used by oracle teachers.
    pub fn oracle_embedding(&self, instance: &SyntheticInstance, modality: Modality) -> Result<Tensor> {
        let map = match modality {
            Modality::Image => &self.bases.oracle_image,
            Modality::Text => &self.bases.oracle_text,
        };
        let z = Tensor::matrix(1, instance.z.len(), instance.z.clone())?;
        z.matmul(map)?.normalize_rows()?.reshape(vec![self.config.oracle_dim])
    }

    /// A fresh view of the instance: the same visible attributes, newly
    /// drawn noise. Plays the role of data augmentation.
    pub fn augment<R: Rng>(&self, instance: &SyntheticInstance, modality: Modality, rng: &mut R) -> Tensor {
        let c = &self.config;
        match modality {
            Modality::Image => render(
                &self.bases.image,
                &instance.image_attributes,
                c.image_tokens,
                c.sigma_image,
                rng,
            ),
            Modality::Text => render(
                &self.bases.text,
                &instance.attributes,
                c.text_tokens,
                c.sigma_text,
                rng,
            ),
        }
    }

    /// The noiseless feature embedding of one attribute.
    pub fn attribute_feature(&self, attribute: usize, modality: Modality) -> &[f64] {
        match modality {
            Modality::Image => self.bases.image.row(attribute),
            Modality::Text => self.bases.text.row(attribute),
        }
    }

    pub(crate) fn from_parts(
        config: GeneratorConfig,
        instances: Vec<SyntheticInstance>,
        split: Split,
    ) -> Result<Self> {
        let bases = Bases::derive(&config)?;
        Ok(Self {
            config,
            instances,
            split,
            bases,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rouge_l;

    #[test]
    fn deterministic_under_seed() {
        let cfg = GeneratorConfig::imbalanced(60, 9);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = generate(&GeneratorConfig::imbalanced(60, 10)).unwrap();
        assert_ne!(generate(&cfg).unwrap(), other);
    }

    #[test]
    fn vocab_smaller_than_attribute_count_is_rejected() {
        let mut cfg = GeneratorConfig::imbalanced(10, 0);
        cfg.vocab.truncate(2);
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn imbalanced_preset_enforces_noise_order() {
        let mut cfg = GeneratorConfig::imbalanced(10, 0);
        cfg.sigma_image = 0.05;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.sigma_image = 0.5;
        cfg.drop_rate_image = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let c = generate(&GeneratorConfig::imbalanced(101, 3)).unwrap();
        let mut all: Vec<usize> = c
            .split
            .train
            .iter()
            .chain(&c.split.val)
            .chain(&c.split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert!(!c.split.test.is_empty());
    }

    #[test]
    fn balanced_views_carry_identical_attributes() {
        let c = generate(&GeneratorConfig::balanced(50, 1)).unwrap();
        for inst in &c.instances {
            assert_eq!(inst.attributes, inst.image_attributes);
            for (l, row) in inst.feats(Modality::Image).data().chunks(c.config.d_feat).enumerate() {
                let a = inst.attributes[l % inst.attributes.len()];
                assert_eq!(row, c.attribute_feature(a, Modality::Image));
            }
        }
    }

    #[test]
    fn captions_use_vocabulary_and_stay_in_length_band() {
        let c = generate(&GeneratorConfig::imbalanced(200, 2)).unwrap();
        let mut allowed: Vec<&str> = filler_tokens().collect();
        for w in &c.config.vocab {
            allowed.extend(w.surface_forms());
        }
        for inst in &c.instances {
            assert!((8..=20).contains(&inst.caption.len()));
            assert!(inst.caption.iter().all(|t| allowed.contains(&t.as_str())));
        }
    }

    #[test]
    fn same_attribute_sets_have_high_rouge() {
        // Worst case over every synonym choice for a shared attribute set.
        let cfg = GeneratorConfig::imbalanced(10, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst = f64::INFINITY;
        for _ in 0..500 {
            let attrs = rand::seq::index::sample(&mut rng, cfg.vocab.len(), 3).into_vec();
            let mut attrs = attrs;
            attrs.sort_unstable();
            let a = caption_for(&cfg, &attrs, &mut rng);
            let b = caption_for(&cfg, &attrs, &mut rng);
            worst = worst.min(rouge_l(&a, &b).unwrap());
        }
        assert!(worst >= 0.6, "worst {worst}");
    }

    #[test]
    fn oracle_embedding_is_unit_and_noiseless() {
        let c = generate(&GeneratorConfig::imbalanced(20, 4)).unwrap();
        let e = c.oracle_embedding(&c.instances[3], Modality::Text).unwrap();
        assert_eq!(e.len(), c.config.oracle_dim);
        assert!((e.norm() - 1.0).abs() < 1e-12);
        assert_eq!(e, c.oracle_embedding(&c.instances[3], Modality::Text).unwrap());
    }

    #[test]
    fn augmentation_keeps_visible_attributes() {
        let c = generate(&GeneratorConfig::imbalanced(20, 4)).unwrap();
        let inst = &c.instances[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = c.augment(inst, Modality::Image, &mut rng);
        assert_eq!(v.shape(), inst.feats(Modality::Image).shape());
        assert_ne!(&v, inst.feats(Modality::Image));
    }
}
