//! Small statistics helpers used by the Monte-Carlo estimators and the
//! experiment summaries.

/// Streaming mean/variance accumulator (Welford), mergeable across threads.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Count-weighted merge (Chan et al.).
    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        let w = other.count as f64 / n;
        self.mean += delta * w;
        self.m2 += other.m2 + delta * delta * self.count as f64 * w;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = RunningStats::new();
        for x in iter {
            s.push(x);
        }
        s
    }
}

/// Joint accumulator for a ratio estimator `mean(a) / mean(b)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RatioStats {
    pub a: RunningStats,
    pub b: RunningStats,
    count: u64,
    mean_a: f64,
    mean_b: f64,
    c_ab: f64,
}

impl RatioStats {
    pub fn push(&mut self, a: f64, b: f64) {
        self.count += 1;
        let n = self.count as f64;
        let da = a - self.mean_a;
        self.mean_a += da / n;
        self.mean_b += (b - self.mean_b) / n;
        self.c_ab += da * (b - self.mean_b);
        self.a.push(a);
        self.b.push(b);
    }

    pub fn merge(&mut self, other: &RatioStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let da = other.mean_a - self.mean_a;
        let db = other.mean_b - self.mean_b;
        self.c_ab += other.c_ab + da * db * na * nb / n;
        self.mean_a += da * nb / n;
        self.mean_b += db * nb / n;
        self.count += other.count;
        self.a.merge(&other.a);
        self.b.merge(&other.b);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn ratio(&self) -> f64 {
        self.a.mean() / self.b.mean()
    }

    /// Delta-method standard error of the ratio of means.
    pub fn ratio_std_err(&self) -> f64 {
        let n = self.count as f64;
        if self.count < 2 {
            return 0.0;
        }
        let r = self.ratio();
        let cov = self.c_ab / (n - 1.0);
        let var = (self.a.variance() - 2.0 * r * cov + r * r * self.b.variance()).max(0.0);
        (var / n).sqrt() / self.b.mean().abs()
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Average ranks (1-based). Values within `tie_rtol` relative distance of
/// the start of a run are treated as ties.
fn ranks(values: &[f64], tie_rtol: f64) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let base = values[idx[i]];
        let mut j = i + 1;
        while j < idx.len() {
            let v = values[idx[j]];
            let scale = base.abs().max(v.abs()).max(f64::MIN_POSITIVE);
            if (v - base).abs() <= tie_rtol * scale {
                j += 1;
            } else {
                break;
            }
        }
        let avg = (i + j - 1) as f64 / 2.0 + 1.0;
        for &k in &idx[i..j] {
            out[k] = avg;
        }
        i = j;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        // a constant series carries no monotone association
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation with tie tolerance `tie_rtol` (relative).
pub fn spearman(x: &[f64], y: &[f64], tie_rtol: f64) -> f64 {
    assert_eq!(x.len(), y.len());
    pearson(&ranks(x, tie_rtol), &ranks(y, tie_rtol))
}

/// Ordinary least-squares slope of y on x.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in x.iter().zip(y) {
        num += (a - mx) * (b - my);
        den += (a - mx) * (a - mx);
    }
    num / den
}
