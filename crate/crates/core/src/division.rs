//! Confident consensus division.
//!
//! Clean pairs are fitted earlier than mismatched ones, so early in training
//! their per-sample loss is lower. Each branch (BGE and TSE) gets its own
//! per-sample TAL vector, min-max normalised to `[0, 1]`; a two-component 1-D
//! Gaussian mixture fitted by EM turns every loss into a posterior of
//! belonging to the low-mean ("clean") component, and thresholding at `δ`
//! splits the branch into clean and noisy sets. The consensus keeps as clean
//! only what both branches call clean, as noisy only what both call noisy, and
//! marks the rest uncertain. Recalibrated correspondence labels are 1 on the
//! clean set, 0 on the noisy set and a fair coin flip on the uncertain set.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;

use crate::encoder::{encode_pairs, similarity_block, EncoderParams, ItemEncoding};
use crate::error::{Error, Result};
use crate::losses::{tal, BatchSimilarities, Branch, LossConfig};
use crate::math::rng_from;
use crate::synth_data::PairDataset;
use crate::trainer::batch_labels;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-sample losses of both branches, raw and min-max normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleLosses {
    pub bge_raw: Vec<f64>,
    pub tse_raw: Vec<f64>,
    pub bge: Vec<f64>,
    pub tse: Vec<f64>,
    /// Set when a branch's losses were all equal and normalisation fell back
    /// to 0.5 everywhere.
    pub bge_degenerate: bool,
    pub tse_degenerate: bool,
}

/// Min-max normalise to `[0, 1]`. A constant vector maps to all 0.5 and the
/// flag is raised.
pub fn min_max_normalize(values: &[f64]) -> (Vec<f64>, bool) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater) {
        return (vec![0.5; values.len()], true);
    }
    let span = max - min;
    (values.iter().map(|v| (v - min) / span).collect(), false)
}

/// One no-gradient pass: TAL per pair, computed within seeded batches of
/// `batch_size` using the original identity-aware labels.
pub fn per_sample_losses(
    params: &EncoderParams,
    dataset: &PairDataset,
    batch_size: usize,
    cfg: &LossConfig,
    seed: u64,
) -> Result<PerSampleLosses> {
    if !params.is_finite() {
        return Err(Error::Numeric("encoder parameters are not finite".into()));
    }
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    let n = dataset.len();
    let encoded = encode_pairs(params, &dataset.items)?;
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_from(seed));
    }
    let mut bge_raw = vec![0.0; n];
    let mut tse_raw = vec![0.0; n];
    for chunk in order.chunks(batch_size) {
        let ids: Vec<u32> = chunk.iter().map(|&i| dataset.items[i].identity).collect();
        let labels = batch_labels(&ids, &vec![true; chunk.len()]);
        let images: Vec<&ItemEncoding> = chunk.iter().map(|&i| &encoded[i].image).collect();
        let texts: Vec<&ItemEncoding> = chunk.iter().map(|&i| &encoded[i].text).collect();
        for (branch, out) in [(Branch::Bge, &mut bge_raw), (Branch::Tse, &mut tse_raw)] {
            let sims = similarity_block(&images, &texts, branch);
            let batch = BatchSimilarities::new(sims, labels.clone(), branch)?;
            let value = tal(&batch, cfg)?;
            for (pos, &i) in chunk.iter().enumerate() {
                out[i] = value.per_pair[pos];
            }
        }
    }
    let (bge, bge_degenerate) = min_max_normalize(&bge_raw);
    let (tse, tse_degenerate) = min_max_normalize(&tse_raw);
    Ok(PerSampleLosses {
        bge_raw,
        tse_raw,
        bge,
        tse,
        bge_degenerate,
        tse_degenerate,
    })
}

/// Two-component 1-D Gaussian mixture. Component 0 has the lower mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmParams {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Log-likelihood of the data under the parameters entering each EM
    /// iteration, followed by that of the final parameters.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub var_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            var_floor: 1e-6,
        }
    }
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

impl GmmParams {
    /// `log p(x, k)` for both components.
    fn joint_log(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + log_normal_pdf(x, self.means[k], self.variances[k]))
    }

    fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let [a, b] = self.joint_log(x);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .sum()
    }

    /// `p(k = 0 | x)`
    pub fn posterior_clean(&self, x: f64) -> f64 {
        let [a, b] = self.joint_log(x);
        // 1 / (1 + exp(b - a)), evaluated without overflow.
        let d = b - a;
        if d > 0.0 {
            let e = (-d).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + d.exp())
        }
    }

    pub fn posterior_noisy(&self, x: f64) -> f64 {
        1.0 - self.posterior_clean(x)
    }

    fn ordered(mut self) -> Self {
        if self.means[0] > self.means[1] {
            self.weights.swap(0, 1);
            self.means.swap(0, 1);
            self.variances.swap(0, 1);
        }
        self
    }
}

/// `p(k = 0 | ℓ)`
pub fn posterior_clean(params: &GmmParams, loss: f64) -> f64 {
    params.posterior_clean(loss)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn fit_gmm(losses: &[f64]) -> Result<GmmFit> {
    fit_gmm_with(losses, EmOptions::default())
}

/// EM from a deterministic start: means at the 10th and 90th percentiles
/// (min and max if those coincide), equal weights, both variances equal to
/// the sample variance.
pub fn fit_gmm_with(losses: &[f64], opts: EmOptions) -> Result<GmmFit> {
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("GMM input contains non-finite values".into()));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(Error::Degenerate(format!(
            "GMM needs at least 2 distinct values, got {}",
            sorted.len()
        )));
    }
    let mut all = losses.to_vec();
    all.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = (percentile(&all, 0.1), percentile(&all, 0.9));
    if lo == hi {
        lo = all[0];
        hi = all[all.len() - 1];
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = (losses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(opts.var_floor);
    let mut params = GmmParams {
        weights: [0.5, 0.5],
        means: [lo, hi],
        variances: [var, var],
    };

    let mut lls = Vec::new();
    let mut resp = vec![0.0; losses.len()];
    let mut iterations = 0;
    while iterations < opts.max_iter {
        // E-step
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(losses) {
            let [a, b] = params.joint_log(x);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            ll += lse;
            *r = (a - lse).exp();
        }
        if let Some(&prev) = lls.last() {
            if ll - prev < opts.tol {
                lls.push(ll);
                break;
            }
        }
        lls.push(ll);
        iterations += 1;

        // M-step
        let n0: f64 = resp.iter().sum();
        let n1 = n - n0;
        if n0 <= 0.0 || n1 <= 0.0 {
            // One component owns everything; nothing left to move.
            break;
        }
        let m0 = resp.iter().zip(losses).map(|(r, x)| r * x).sum::<f64>() / n0;
        let m1 = resp.iter().zip(losses).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n1;
        let v0 = resp
            .iter()
            .zip(losses)
            .map(|(r, x)| r * (x - m0).powi(2))
            .sum::<f64>()
            / n0;
        let v1 = resp
            .iter()
            .zip(losses)
            .map(|(r, x)| (1.0 - r) * (x - m1).powi(2))
            .sum::<f64>()
            / n1;
        params = GmmParams {
            weights: [n0 / n, n1 / n],
            means: [m0, m1],
            variances: [v0.max(opts.var_floor), v1.max(opts.var_floor)],
        };
    }
    if lls.len() == iterations {
        lls.push(params.log_likelihood(losses));
    }
    Ok(GmmFit {
        params: params.ordered(),
        log_likelihoods: lls,
        iterations,
    })
}

/// One branch's threshold split.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchDivision {
    pub posteriors: Vec<f64>,
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
}

/// `clean = {i : p_i > δ}`, `noisy = {i : p_i ≤ δ}`.
pub fn divide(posteriors: &[f64], threshold: f64) -> Result<BranchDivision> {
    if let Some(p) = posteriors.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Contract(format!("posterior {p} outside [0, 1]")));
    }
    let (clean, noisy): (Vec<usize>, Vec<usize>) =
        (0..posteriors.len()).partition(|&i| posteriors[i] > threshold);
    Ok(BranchDivision {
        posteriors: posteriors.to_vec(),
        clean,
        noisy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivisionSet {
    Clean,
    Noisy,
    Uncertain,
}

impl DivisionSet {
    pub fn code(self) -> char {
        match self {
            DivisionSet::Clean => 'C',
            DivisionSet::Noisy => 'N',
            DivisionSet::Uncertain => 'U',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivisionResult {
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    pub uncertain: Vec<usize>,
    pub posteriors_bge: Vec<f64>,
    pub posteriors_tse: Vec<f64>,
    /// Recalibrated correspondence label per pair.
    pub recalibrated: Vec<bool>,
}

impl DivisionResult {
    /// Everything clean, as during warm-up.
    pub fn all_clean(n: usize) -> Self {
        Self {
            clean: (0..n).collect(),
            noisy: Vec::new(),
            uncertain: Vec::new(),
            posteriors_bge: vec![1.0; n],
            posteriors_tse: vec![1.0; n],
            recalibrated: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.recalibrated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recalibrated.is_empty()
    }

    pub fn set_of(&self) -> Vec<DivisionSet> {
        let mut out = vec![DivisionSet::Uncertain; self.len()];
        for &i in &self.clean {
            out[i] = DivisionSet::Clean;
        }
        for &i in &self.noisy {
            out[i] = DivisionSet::Noisy;
        }
        out
    }

    /// Precision and recall of the confident-clean set against hidden flags.
    pub fn clean_precision_recall(&self, true_clean: &[bool]) -> (f64, f64) {
        let hits = self.clean.iter().filter(|&&i| true_clean[i]).count() as f64;
        let total_true = true_clean.iter().filter(|c| **c).count() as f64;
        let precision = if self.clean.is_empty() {
            0.0
        } else {
            hits / self.clean.len() as f64
        };
        let recall = if total_true == 0.0 { 0.0 } else { hits / total_true };
        (precision, recall)
    }
}

fn check_cover(div: &BranchDivision, n: usize, name: &str) -> Result<()> {
    let clean: BTreeSet<usize> = div.clean.iter().copied().collect();
    let noisy: BTreeSet<usize> = div.noisy.iter().copied().collect();
    let ok = div.posteriors.len() == n
        && clean.len() == div.clean.len()
        && noisy.len() == div.noisy.len()
        && clean.is_disjoint(&noisy)
        && clean.len() + noisy.len() == n
        && clean.iter().chain(&noisy).all(|&i| i < n);
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{name} division does not partition 0..{n}"
        )))
    }
}

/// Intersect the two branch divisions and recalibrate labels, drawing the
/// uncertain ones from `rng` in index order.
pub fn consensus<R: Rng>(bge: &BranchDivision, tse: &BranchDivision, rng: &mut R) -> Result<DivisionResult> {
    let n = bge.posteriors.len();
    check_cover(bge, n, "BGE")?;
    check_cover(tse, n, "TSE")?;
    let mut bge_clean = vec![false; n];
    for &i in &bge.clean {
        bge_clean[i] = true;
    }
    let mut tse_clean = vec![false; n];
    for &i in &tse.clean {
        tse_clean[i] = true;
    }
    let mut out = DivisionResult {
        clean: Vec::new(),
        noisy: Vec::new(),
        uncertain: Vec::new(),
        posteriors_bge: bge.posteriors.clone(),
        posteriors_tse: tse.posteriors.clone(),
        recalibrated: vec![false; n],
    };
    for i in 0..n {
        match (bge_clean[i], tse_clean[i]) {
            (true, true) => {
                out.clean.push(i);
                out.recalibrated[i] = true;
            }
            (false, false) => out.noisy.push(i),
            _ => {
                out.uncertain.push(i);
                out.recalibrated[i] = rng.random_bool(0.5);
            }
        }
    }
    Ok(out)
}

/// Per-branch posteriors from normalised losses. A degenerate branch (all
/// losses equal) cannot be split and is treated as entirely clean.
pub fn branch_posteriors(losses: &[f64], degenerate: bool) -> Result<Vec<f64>> {
    if degenerate {
        return Ok(vec![1.0; losses.len()]);
    }
    match fit_gmm(losses) {
        Ok(fit) => Ok(losses.iter().map(|&l| fit.params.posterior_clean(l)).collect()),
        Err(Error::Degenerate(_)) => Ok(vec![1.0; losses.len()]),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ccd {
    pub losses: PerSampleLosses,
    pub division: DivisionResult,
}

/// Full division for one epoch: losses, GMM per branch, threshold, consensus.
pub fn run_ccd(
    params: &EncoderParams,
    dataset: &PairDataset,
    batch_size: usize,
    cfg: &LossConfig,
    threshold: f64,
    seed: u64,
) -> Result<Ccd> {
    let losses = per_sample_losses(params, dataset, batch_size, cfg, seed)?;
    let post_bge = branch_posteriors(&losses.bge, losses.bge_degenerate)?;
    let post_tse = branch_posteriors(&losses.tse, losses.tse_degenerate)?;
    let div_bge = divide(&post_bge, threshold)?;
    let div_tse = divide(&post_tse, threshold)?;
    let mut rng = rng_from(crate::math::mix_seed(seed, 0x7261_6e64));
    let division = consensus(&div_bge, &div_tse, &mut rng)?;
    Ok(Ccd { losses, division })
}

/// Header of the per-epoch division audit CSV.
pub const AUDIT_HEADER: [&str; 9] = [
    "epoch",
    "pair_id",
    "loss_bge",
    "loss_tse",
    "post_bge",
    "post_tse",
    "set",
    "recalibrated",
    "true_clean_flag",
];

/// Append one epoch of audit rows. `losses` may be absent during warm-up, in
/// which case the loss columns are empty.
pub fn write_audit<W: Write>(
    w: &mut csv::Writer<W>,
    epoch: usize,
    dataset: &PairDataset,
    losses: Option<&PerSampleLosses>,
    division: &DivisionResult,
) -> Result<()> {
    let sets = division.set_of();
    for (i, it) in dataset.items.iter().enumerate() {
        let (lb, lt) = losses.map_or((String::new(), String::new()), |l| {
            (l.bge_raw[i].to_string(), l.tse_raw[i].to_string())
        });
        w.write_record([
            epoch.to_string(),
            it.pair_id.to_string(),
            lb,
            lt,
            division.posteriors_bge[i].to_string(),
            division.posteriors_tse[i].to_string(),
            sets[i].code().to_string(),
            u8::from(division.recalibrated[i]).to_string(),
            u8::from(it.true_clean).to_string(),
        ])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max_cases() {
        assert_eq!(min_max_normalize(&[0.2, 0.8]), (vec![0.0, 1.0], false));
        assert_eq!(min_max_normalize(&[0.3, 0.3]), (vec![0.5, 0.5], true));
    }

    #[test]
    fn divide_boundary_goes_to_noisy() {
        let d = divide(&[0.9, 0.5, 0.1], 0.5).unwrap();
        assert_eq!(d.clean, vec![0]);
        assert_eq!(d.noisy, vec![1, 2]);
        assert_eq!(divide(&[1.0; 4], 0.5).unwrap().clean.len(), 4);
        assert_eq!(divide(&[0.0; 4], 0.5).unwrap().noisy.len(), 4);
        assert!(divide(&[1.5], 0.5).is_err());
    }

    #[test]
    fn symmetric_posterior_is_half() {
        let p = GmmParams {
            weights: [0.5, 0.5],
            means: [0.2, 0.8],
            variances: [0.01, 0.01],
        };
        assert!((p.posterior_clean(0.5) - 0.5).abs() < 1e-15);
        assert!(p.posterior_clean(0.2) > 0.99);
        for x in [-3.0, 0.1, 0.5, 0.77, 10.0] {
            assert!((p.posterior_clean(x) + p.posterior_noisy(x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gmm_rejects_constant_input() {
        assert!(matches!(fit_gmm(&[0.4; 10]), Err(Error::Degenerate(_))));
    }

    fn split(posteriors: Vec<f64>, clean: Vec<usize>, noisy: Vec<usize>) -> BranchDivision {
        BranchDivision {
            posteriors,
            clean,
            noisy,
        }
    }

    #[test]
    fn consensus_set_arithmetic() {
        // Indices 0..4 with pairs {1,2,3} of interest; 0 is clean on both.
        let bge = split(vec![0.9, 0.9, 0.9, 0.1], vec![0, 1, 2], vec![3]);
        let tse = split(vec![0.9, 0.9, 0.1, 0.1], vec![0, 1], vec![2, 3]);
        let r = consensus(&bge, &tse, &mut rng_from(0)).unwrap();
        assert_eq!(r.clean, vec![0, 1]);
        assert_eq!(r.noisy, vec![3]);
        assert_eq!(r.uncertain, vec![2]);
        assert!(r.recalibrated[0] && r.recalibrated[1] && !r.recalibrated[3]);
    }

    #[test]
    fn identical_divisions_leave_nothing_uncertain() {
        let d = split(vec![0.9, 0.2, 0.7], vec![0, 2], vec![1]);
        let r = consensus(&d, &d, &mut rng_from(1)).unwrap();
        assert!(r.uncertain.is_empty());
    }

    #[test]
    fn mismatched_index_sets_are_rejected() {
        let a = split(vec![0.9, 0.2], vec![0], vec![1]);
        let b = split(vec![0.9, 0.2, 0.1], vec![0], vec![1, 2]);
        assert!(matches!(consensus(&a, &b, &mut rng_from(0)), Err(Error::Contract(_))));
        let overlapping = split(vec![0.9, 0.2], vec![0, 1], vec![1]);
        assert!(consensus(&a, &overlapping, &mut rng_from(0)).is_err());
    }

    #[test]
    fn consensus_is_reproducible_for_a_seed() {
        let bge = split(vec![0.9; 6], (0..6).collect(), vec![]);
        let tse = split(vec![0.1; 6], vec![], (0..6).collect());
        let a = consensus(&bge, &tse, &mut rng_from(42)).unwrap();
        let b = consensus(&bge, &tse, &mut rng_from(42)).unwrap();
        assert_eq!(a.recalibrated, b.recalibrated);
        assert_eq!(a.uncertain.len(), 6);
    }

    #[test]
    fn degenerate_branch_counts_as_clean() {
        assert_eq!(branch_posteriors(&[0.5, 0.5], true).unwrap(), vec![1.0, 1.0]);
    }
}
