//! Dice overlap for patches and whole slides, and the Wilcoxon signed-rank
//! test for paired per-case scores.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mask::{BitGrid, RleReader, WsiMask, SEGMENTATION_MAGIC};

/// Largest effective sample size for which the exact null distribution is
/// used.
pub const EXACT_MAX_N: usize = 25;

/// `2|P∩G| / (|P| + |G|)`, and 1 when both are empty.
pub fn dice_from_counts(intersection: u64, pred: u64, gt: u64) -> f64 {
    if pred + gt == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (pred + gt) as f64
    }
}

pub fn dice(pred: &BitGrid, gt: &BitGrid) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    Ok(dice_from_counts(pred.and_count(gt), pred.count_ones(), gt.count_ones()))
}

/// Intersection and cardinalities of two run streams that alternate
/// background/foreground, starting with background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlapCounts {
    pub intersection: u64,
    pub pred: u64,
    pub gt: u64,
}

impl OverlapCounts {
    pub fn dice(&self) -> f64 {
        dice_from_counts(self.intersection, self.pred, self.gt)
    }
}

struct RunCursor<F> {
    next: F,
    left: u64,
    value: bool,
    started: bool,
}

impl<F: FnMut() -> Result<Option<u64>>> RunCursor<F> {
    /// Advances to a nonempty run; `false` once the stream ends.
    fn fill(&mut self) -> Result<bool> {
        while self.left == 0 {
            match (self.next)()? {
                Some(n) => {
                    if self.started {
                        self.value = !self.value;
                    }
                    self.started = true;
                    self.left = n;
                }
                None => return Ok(false),
            }
        }
        Ok(true)
    }
}

/// Merges two run streams covering the same pixel count.
pub fn overlap_runs(
    pred: impl FnMut() -> Result<Option<u64>>,
    gt: impl FnMut() -> Result<Option<u64>>,
) -> Result<OverlapCounts> {
    let mut a = RunCursor {
        next: pred,
        left: 0,
        value: false,
        started: false,
    };
    let mut b = RunCursor {
        next: gt,
        left: 0,
        value: false,
        started: false,
    };
    let mut out = OverlapCounts::default();
    loop {
        let (ha, hb) = (a.fill()?, b.fill()?);
        match (ha, hb) {
            (false, false) => return Ok(out),
            (true, true) => {}
            _ => return Err(Error::Shape("run streams cover different pixel counts".into())),
        }
        let n = a.left.min(b.left);
        if a.value {
            out.pred += n;
        }
        if b.value {
            out.gt += n;
        }
        if a.value && b.value {
            out.intersection += n;
        }
        a.left -= n;
        b.left -= n;
    }
}

fn check_pair(pred: (usize, usize, usize), gt: (usize, usize, usize)) -> Result<()> {
    if pred != gt {
        return Err(Error::Bounds(format!(
            "prediction level {} {}x{} does not match ground truth level {} {}x{}",
            pred.0, pred.1, pred.2, gt.0, gt.1, gt.2
        )));
    }
    Ok(())
}

/// Whole-slide Dice computed from the masks' run-length form.
pub fn wsi_dice(pred: &WsiMask, gt: &WsiMask) -> Result<f64> {
    check_pair(
        (pred.level, pred.width(), pred.height()),
        (gt.level, gt.width(), gt.height()),
    )?;
    let (mut ra, mut rb) = (pred.bits.runs(), gt.bits.runs());
    Ok(overlap_runs(|| Ok(ra.next()), || Ok(rb.next()))?.dice())
}

/// Whole-slide Dice streamed straight from two `.hhsm` files.
pub fn wsi_dice_files(pred: impl AsRef<Path>, gt: impl AsRef<Path>) -> Result<f64> {
    let mut a = RleReader::open(pred, SEGMENTATION_MAGIC)?;
    let mut b = RleReader::open(gt, SEGMENTATION_MAGIC)?;
    let (aw, ah) = a.dims();
    let (bw, bh) = b.dims();
    check_pair((a.level(), aw, ah), (b.level(), bw, bh))?;
    Ok(overlap_runs(|| a.next_run(), || b.next_run())?.dice())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceMode {
    Patch,
    Wsi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceItem {
    pub id: String,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonSummary {
    /// Path of the report compared against.
    pub vs: String,
    pub n_effective: usize,
    pub w_statistic: f64,
    pub p: f64,
    pub method: WilcoxonMethod,
    /// Set when every paired difference was zero; `p` is then 1.
    #[serde(default)]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub mode: DiceMode,
    pub items: Vec<DiceItem>,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wilcoxon: Option<WilcoxonSummary>,
}

impl DiceReport {
    pub fn new(mode: DiceMode, items: Vec<DiceItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidInput("a Dice report needs at least one item".into()));
        }
        let mean = items.iter().map(|i| i.dice).sum::<f64>() / items.len() as f64;
        Ok(Self {
            mode,
            items,
            mean,
            wilcoxon: None,
        })
    }

    /// Pairs this report with `other` by item id and attaches the test.
    pub fn compare(&mut self, other: &DiceReport, other_name: &str) -> Result<()> {
        let pairs = self
            .items
            .iter()
            .map(|i| {
                other
                    .items
                    .iter()
                    .find(|o| o.id == i.id)
                    .map(|o| (i.dice, o.dice))
                    .ok_or_else(|| Error::InvalidInput(format!("item {} missing from {other_name}", i.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = match wilcoxon_signed_rank(&pairs) {
            Ok(r) => WilcoxonSummary {
                vs: other_name.to_string(),
                n_effective: r.n_effective,
                w_statistic: r.w_statistic,
                p: r.p_value,
                method: r.method,
                degenerate: false,
            },
            Err(Error::DegenerateSample) => WilcoxonSummary {
                vs: other_name.to_string(),
                n_effective: 0,
                w_statistic: 0.0,
                p: 1.0,
                method: WilcoxonMethod::Exact,
                degenerate: true,
            },
            Err(e) => return Err(e),
        };
        self.wilcoxon = Some(summary);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W−)`.
    pub w_statistic: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks of `|d|` (1-based), ties sharing the mean of their
/// positions.
pub fn signed_ranks(diffs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided exact p-value: `min(1, 2·P(T ≤ w))` where `T` is the sum of
/// the ranks given positive signs under independent fair signs.
pub fn exact_p_value(ranks: &[f64], w: f64) -> f64 {
    // Average ranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * w).round() as usize;
    let below: u64 = counts[..=limit.min(total)].iter().sum();
    let all = 2f64.powi(ranks.len() as i32);
    (2.0 * below as f64 / all).min(1.0)
}

/// Paired signed-rank test on `(a, b)` with differences `a − b`.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("Wilcoxon test needs at least one pair".into()));
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::Numerical("non-finite paired value".into()));
    }
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::DegenerateSample);
    }
    let n = diffs.len();
    let ranks = signed_ranks(&diffs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();
    let w = w_plus.min(w_minus);
    let (p_value, method) = if n <= EXACT_MAX_N {
        (exact_p_value(&ranks, w), WilcoxonMethod::Exact)
    } else {
        (normal_p_value(&ranks, w), WilcoxonMethod::NormalApprox)
    };
    Ok(WilcoxonResult {
        n_effective: n,
        w_plus,
        w_minus,
        w_statistic: w,
        p_value,
        method,
    })
}

/// Normal approximation with tie-corrected variance and continuity
/// correction.
pub fn normal_p_value(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * normal.cdf(-z)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// Enumerates every sign assignment.
    fn brute_p(ranks: &[f64], w: f64) -> f64 {
        let n = ranks.len();
        let mut below = 0u64;
        for mask in 0u64..1 << n {
            let t: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if t <= w + 1e-9 {
                below += 1;
            }
        }
        (2.0 * below as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn dice_examples() {
        let a = BitGrid::from_fn(5, 2, |x, _| x < 2);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = BitGrid::from_fn(5, 2, |x, _| x >= 3);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let p = BitGrid::from_fn(4, 4, |_, y| y == 0);
        let g = BitGrid::from_fn(4, 4, |x, y| (y == 0 && x < 3) || (y == 1 && x < 3));
        assert!((dice(&p, &g).unwrap() - 0.6).abs() < 1e-15);
        let e = BitGrid::new(3, 3);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(matches!(dice(&e, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn streamed_equals_dense() {
        let mut r = rng::stream(5, 0);
        for _ in 0..40 {
            let (w, h) = (r.random_range(1..200), r.random_range(1..60));
            let density = r.random::<f64>();
            let pa: Vec<bool> = (0..w * h).map(|_| r.random::<f64>() < density).collect();
            let pb: Vec<bool> = (0..w * h).map(|_| r.random::<f64>() < 0.3).collect();
            let a = WsiMask::new(0, BitGrid::from_bools(w, h, &pa).unwrap());
            let b = WsiMask::new(0, BitGrid::from_bools(w, h, &pb).unwrap());
            assert_eq!(wsi_dice(&a, &b).unwrap(), dice(&a.bits, &b.bits).unwrap());
        }
    }

    #[test]
    fn level_mismatch_is_bounds_error() {
        let a = WsiMask::empty(0, 4, 4);
        let b = WsiMask::empty(1, 4, 4);
        assert!(matches!(wsi_dice(&a, &b), Err(Error::Bounds(_))));
    }

    #[test]
    fn all_positive_five() {
        let pairs: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64, 0.0)).collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        assert_eq!(r.w_statistic, 0.0);
        assert_eq!(r.p_value, 2.0 / 32.0);
        assert_eq!(r.method, WilcoxonMethod::Exact);
    }

    #[test]
    fn antisymmetric_pair() {
        let r = wilcoxon_signed_rank(&[(1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert_eq!(r.w_plus, r.w_minus);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn zero_differences() {
        assert!(matches!(wilcoxon_signed_rank(&[(0.5, 0.5), (1.0, 1.0)]), Err(Error::DegenerateSample)));
        let r = wilcoxon_signed_rank(&[(0.5, 0.5), (2.0, 1.0)]).unwrap();
        assert_eq!(r.n_effective, 1);
    }

    #[test]
    fn exact_matches_enumeration_with_ties() {
        let mut r = rng::stream(6, 0);
        for _ in 0..30 {
            let n = r.random_range(1..=12);
            let pairs: Vec<(f64, f64)> = (0..n)
                .map(|_| (r.random_range(-3..=3) as f64, r.random_range(-3..=3) as f64))
                .collect();
            let Ok(res) = wilcoxon_signed_rank(&pairs) else { continue };
            let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
            let ranks = signed_ranks(&diffs);
            assert_eq!(res.p_value, brute_p(&ranks, res.w_statistic));
        }
    }

    #[test]
    fn report_mean_and_json() {
        let items = vec![
            DiceItem {
                id: "a".into(),
                dice: 0.5,
            },
            DiceItem {
                id: "b".into(),
                dice: 1.0,
            },
        ];
        let mut rep = DiceReport::new(DiceMode::Wsi, items).unwrap();
        assert_eq!(rep.mean, 0.75);
        let other = rep.clone();
        rep.compare(&other, "other.json").unwrap();
        assert!(rep.wilcoxon.as_ref().unwrap().degenerate);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"mode\":\"wsi\""));
        assert!(DiceReport::new(DiceMode::Patch, vec![]).is_err());
    }
}
