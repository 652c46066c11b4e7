//! Synthetic person-retrieval datasets with known noisy correspondences.
//!
//! Each identity owns a random prototype vector: a shared offset of norm
//! `prototype_offset` along the all-ones direction plus a standard Gaussian
//! draw. The shared part plays the role of the common "person" component real
//! features carry. Images and captions of that identity are the prototype plus
//! independent Gaussian noise, so a clean pair shares its prototype and a
//! corrupted pair does not. Noise is injected by
//! permuting caption features among a random subset of pairs such that no
//! caption lands on an image of its own identity; the ground truth is kept in a
//! hidden flag that training never reads.
//!
//! # Record format
//!
//! ```text
//! # rml-dataset v1 raw_dim=<D> pairs=<N>
//! pair_id,identity,image_label,correspondence_label,true_clean_flag,img_0,..,img_{D-1},txt_0,..,txt_{D-1}
//! ```
//!
//! One line per pair after the header. Reals are written in Rust's shortest
//! round-trip decimal form, so `load(save(x)) == x` bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::{mix_seed, rng_from};

const HEADER_TAG: &str = "# rml-dataset v1";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    pub raw_dim: usize,
    pub intra_identity_noise_std: f64,
    /// Norm of the component every prototype shares.
    pub prototype_offset: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_identities: 200,
            images_per_identity: 4,
            captions_per_image: 2,
            raw_dim: 64,
            intra_identity_noise_std: 0.6,
            prototype_offset: 8.0,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Config(format!(
                "need at least 2 identities, got {}",
                self.num_identities
            )));
        }
        if self.raw_dim < 2 {
            return Err(Error::Config(format!(
                "raw_dim must be at least 2, got {}",
                self.raw_dim
            )));
        }
        if self.images_per_identity == 0 || self.captions_per_image == 0 {
            return Err(Error::Config(
                "images_per_identity and captions_per_image must be positive".into(),
            ));
        }
        if !(self.intra_identity_noise_std >= 0.0 && self.intra_identity_noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "intra_identity_noise_std must be finite and nonnegative, got {}",
                self.intra_identity_noise_std
            )));
        }
        if !self.prototype_offset.is_finite() {
            return Err(Error::Config(format!(
                "prototype_offset must be finite, got {}",
                self.prototype_offset
            )));
        }
        Ok(())
    }

    pub fn num_pairs(&self) -> usize {
        self.num_identities * self.images_per_identity * self.captions_per_image
    }
}

/// One image/caption pair as presented to training.
#[derive(Debug, Clone, PartialEq)]
pub struct PairItem {
    pub pair_id: u64,
    /// Identity of the image, in `1..=C`.
    pub identity: u32,
    pub image_label: u32,
    /// The observed correspondence label. Always 1: every pair is presented as
    /// a positive, corrupted or not.
    pub correspondence_label: bool,
    /// Hidden ground truth: the caption was generated from this image's
    /// identity prototype.
    pub true_clean: bool,
    pub image_raw: Vec<f64>,
    pub text_raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub raw_dim: usize,
    pub items: Vec<PairItem>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub noise_rate: f64,
    pub seed: u64,
}

/// Generate a dataset. Identical configs give bit-identical datasets.
pub fn generate(config: &DatasetConfig) -> Result<PairDataset> {
    config.validate()?;
    let mut rng = rng_from(config.seed);
    let sigma = config.intra_identity_noise_std;
    let dim = config.raw_dim;
    let mut items = Vec::with_capacity(config.num_pairs());
    let mut image_label = 0u32;
    let shared = config.prototype_offset / (dim as f64).sqrt();

    let sample = |rng: &mut rand_chacha::ChaCha8Rng, base: &[f64]| -> Vec<f64> {
        base.iter()
            .map(|b| b + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    for identity in 1..=config.num_identities as u32 {
        let prototype: Vec<f64> = (0..dim)
            .map(|_| shared + rng.sample::<f64, _>(StandardNormal))
            .collect();
        for _ in 0..config.images_per_identity {
            let image_raw = sample(&mut rng, &prototype);
            for _ in 0..config.captions_per_image {
                let text_raw = sample(&mut rng, &prototype);
                items.push(PairItem {
                    pair_id: items.len() as u64,
                    identity,
                    image_label,
                    correspondence_label: true,
                    true_clean: true,
                    image_raw: image_raw.clone(),
                    text_raw,
                });
            }
            image_label += 1;
        }
    }
    Ok(PairDataset {
        raw_dim: dim,
        items,
    })
}

/// Corrupt exactly `⌊rate·N⌋` pairs by permuting their captions so that no
/// caption ends up on an image of its own identity.
pub fn inject_noise(dataset: &PairDataset, spec: &NoiseSpec) -> Result<PairDataset> {
    let rate = spec.noise_rate;
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "noise rate must lie in [0, 1), got {rate}"
        )));
    }
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Config("cannot inject noise into an empty dataset".into()));
    }
    let count = (rate * n as f64).floor() as usize;
    let mut out = dataset.clone();
    if count == 0 {
        return Ok(out);
    }

    let mut rng = rng_from(spec.seed);
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    let groups: Vec<u32> = chosen.iter().map(|&i| dataset.items[i].identity).collect();
    let perm = cross_group_permutation(&groups, &mut rng)?;

    for (slot, &target) in chosen.iter().enumerate() {
        let source = chosen[perm[slot]];
        out.items[target].text_raw = dataset.items[source].text_raw.clone();
        out.items[target].true_clean = false;
    }
    Ok(out)
}

/// Random permutation `p` of `0..groups.len()` with `groups[p[k]] != groups[k]`
/// for every `k`.
///
/// Such a permutation exists iff no group holds more than half the items. We
/// build one by ordering items group-contiguously and rotating by the largest
/// group size, then randomise it with validity-preserving transpositions.
fn cross_group_permutation<R: Rng>(groups: &[u32], rng: &mut R) -> Result<Vec<usize>> {
    let n = groups.len();
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for &g in groups {
        *sizes.entry(g).or_default() += 1;
    }
    let largest = sizes.values().copied().max().unwrap_or(0);
    if 2 * largest > n {
        return Err(Error::NoiseInjection(format!(
            "{largest} of the {n} corrupted pairs share one identity; no permutation can move \
             every caption to a different identity"
        )));
    }

    // Random group order, random order within groups.
    let mut group_key: BTreeMap<u32, u64> = BTreeMap::new();
    for &g in sizes.keys() {
        group_key.insert(g, rng.random());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.sort_by_key(|&k| group_key[&groups[k]]);

    let mut perm = vec![0usize; n];
    for p in 0..n {
        perm[order[p]] = order[(p + largest) % n];
    }

    for _ in 0..4 * n {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        if groups[perm[b]] != groups[a] && groups[perm[a]] != groups[b] {
            perm.swap(a, b);
        }
    }
    debug_assert!((0..n).all(|k| groups[perm[k]] != groups[k]));
    Ok(perm)
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn identities(&self) -> BTreeSet<u32> {
        self.items.iter().map(|it| it.identity).collect()
    }

    pub fn num_noisy(&self) -> usize {
        self.items.iter().filter(|it| !it.true_clean).count()
    }

    /// Items whose identity is in `keep`, in original order.
    pub fn filter_identities(&self, keep: &BTreeSet<u32>) -> PairDataset {
        PairDataset {
            raw_dim: self.raw_dim,
            items: self
                .items
                .iter()
                .filter(|it| keep.contains(&it.identity))
                .cloned()
                .collect(),
        }
    }

    /// Identity-disjoint train/validation/test partition. The highest
    /// identities form the test split, the next block the validation split.
    pub fn split(&self, fractions: SplitFractions) -> Result<DataSplits> {
        fractions.validate()?;
        let ids: Vec<u32> = self.identities().into_iter().collect();
        let c = ids.len();
        let n_test = (fractions.test * c as f64).ceil() as usize;
        let n_val = (fractions.val * c as f64).ceil() as usize;
        if n_test + n_val >= c {
            return Err(Error::Config(format!(
                "split fractions leave no training identities out of {c}"
            )));
        }
        let train_ids: BTreeSet<u32> = ids[..c - n_test - n_val].iter().copied().collect();
        let val_ids: BTreeSet<u32> = ids[c - n_test - n_val..c - n_test].iter().copied().collect();
        let test_ids: BTreeSet<u32> = ids[c - n_test..].iter().copied().collect();
        Ok(DataSplits {
            train: self.filter_identities(&train_ids),
            val: self.filter_identities(&val_ids),
            test: self.filter_identities(&test_ids),
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{HEADER_TAG} raw_dim={} pairs={}", self.raw_dim, self.len())?;
        let mut line = String::new();
        for it in &self.items {
            use std::fmt::Write as _;
            line.clear();
            let _ = write!(
                line,
                "{},{},{},{},{}",
                it.pair_id,
                it.identity,
                it.image_label,
                u8::from(it.correspondence_label),
                u8::from(it.true_clean)
            );
            for v in it.image_raw.iter().chain(&it.text_raw) {
                let _ = write!(line, ",{v}");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<PairDataset> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty file"))??;
        let rest = header
            .strip_prefix(HEADER_TAG)
            .ok_or_else(|| Error::parse(1, format!("expected header starting with `{HEADER_TAG}`")))?;
        let mut raw_dim = None;
        let mut pairs = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("raw_dim", v)) => raw_dim = v.parse::<usize>().ok(),
                Some(("pairs", v)) => pairs = v.parse::<usize>().ok(),
                _ => return Err(Error::parse(1, format!("unknown header field `{field}`"))),
            }
        }
        let raw_dim = raw_dim.ok_or_else(|| Error::parse(1, "missing raw_dim"))?;
        let pairs = pairs.ok_or_else(|| Error::parse(1, "missing pairs"))?;

        let mut items = Vec::with_capacity(pairs);
        let mut seen = BTreeSet::new();
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 + 2 * raw_dim {
                return Err(Error::parse(
                    lineno,
                    format!("expected {} fields, found {}", 5 + 2 * raw_dim, fields.len()),
                ));
            }
            let int = |s: &str, what: &str| -> Result<u64> {
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::parse(lineno, format!("bad {what} `{s}`: {e}")))
            };
            let bit = |s: &str, what: &str| -> Result<bool> {
                match s.trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::parse(lineno, format!("bad {what} `{other}`"))),
                }
            };
            let pair_id = int(fields[0], "pair_id")?;
            if !seen.insert(pair_id) {
                return Err(Error::parse(lineno, format!("duplicate pair_id {pair_id}")));
            }
            let mut reals = Vec::with_capacity(2 * raw_dim);
            for s in &fields[5..] {
                let v: f64 = s
                    .trim()
                    .parse()
                    .map_err(|e| Error::parse(lineno, format!("bad real `{s}`: {e}")))?;
                reals.push(v);
            }
            let text_raw = reals.split_off(raw_dim);
            items.push(PairItem {
                pair_id,
                identity: int(fields[1], "identity")? as u32,
                image_label: int(fields[2], "image_label")? as u32,
                correspondence_label: bit(fields[3], "correspondence_label")?,
                true_clean: bit(fields[4], "true_clean_flag")?,
                image_raw: reals,
                text_raw,
            });
        }
        if items.len() != pairs {
            return Err(Error::parse(
                items.len() + 1,
                format!("header announces {pairs} pairs, file holds {}", items.len()),
            ));
        }
        Ok(PairDataset { raw_dim, items })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::file(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PairDataset> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { val: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..1.0).contains(&f);
        if !ok(self.val) || !ok(self.test) || self.val + self.test >= 1.0 {
            return Err(Error::Config(format!("invalid split fractions {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: PairDataset,
    pub val: PairDataset,
    pub test: PairDataset,
}

/// Seed used for the noise injected into the training split of a run.
pub fn noise_seed(run_seed: u64) -> u64 {
    mix_seed(run_seed, 0x6e6f_6973)
}
