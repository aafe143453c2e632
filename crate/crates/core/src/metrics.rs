//! Confusion matrices and one-vs-rest per-class scores.
//!
//! Per class `k`, with TP/TN/FP/FN counted one-vs-rest:
//!
//! | metric | definition |
//! |--------|------------|
//! | ACC    | (TP + TN) / total |
//! | SEN    | TP / (TP + FN) |
//! | PPV    | TP / (TP + FP) |
//! | SPEC   | TN / (TN + FP) |
//! | F1     | 2 ACC SEN / (ACC + SEN) |
//! | F1 (standard) | 2 PPV SEN / (PPV + SEN) |
//!
//! The first F1 pairs accuracy with sensitivity. It is the variant the
//! reference MIT-BIH and PTB score tables use, so it is the headline `f1`; the conventional precision/recall F1 is reported next to it
//! as `f1_standard`. Macro averages are unweighted means over classes.
//! Values are percentages kept at full precision; rounding happens only
//! when rendering.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Square count matrix, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.k + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k, "merging matrices of different size");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// Fraction of records on the diagonal.
    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// One-vs-rest `(tp, tn, fp, fn)` for `class`.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(class, class);
        let row: u64 = (0..self.k).map(|p| self.get(class, p)).sum();
        let col: u64 = (0..self.k).map(|t| self.get(t, class)).sum();
        let (fn_, fp) = (row - tp, col - tp);
        (tp, self.total() - tp - fn_ - fp, fp, fn_)
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("true\\pred");
        for n in names {
            write!(s, ",{n}").unwrap();
        }
        s.push('\n');
        for (t, n) in names.iter().enumerate() {
            s.push_str(n);
            for p in 0..self.k {
                write!(s, ",{}", self.get(t, p)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Counts `(label, prediction)` pairs into a `k x k` matrix.
pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::dim("confusion", &[preds.len()], &[labels.len()]));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::Config(format!(
                "class index out of range for {k} classes: true {t}, predicted {p}"
            )));
        }
        cm.record(t, p);
    }
    Ok(cm)
}

/// Scores for one class (or their macro average), in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub acc: f64,
    pub sen: f64,
    pub f1: f64,
    pub ppv: f64,
    pub spec: f64,
    pub f1_standard: f64,
}

/// A metric whose denominator was zero for some class; its value is reported as 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZeroDivision {
    pub class: usize,
    pub metric: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
    pub macro_avg: ClassMetrics,
    pub zero_division: Vec<ZeroDivision>,
}

fn pct(num: f64, den: f64, class: usize, metric: &'static str, flags: &mut Vec<ZeroDivision>) -> f64 {
    if den == 0.0 {
        flags.push(ZeroDivision { class, metric });
        0.0
    } else {
        100.0 * num / den
    }
}

fn harmonic(a: f64, b: f64, class: usize, metric: &'static str, flags: &mut Vec<ZeroDivision>) -> f64 {
    if a + b == 0.0 {
        flags.push(ZeroDivision { class, metric });
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<ClassReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Config("cannot score an empty confusion matrix".into()));
    }
    let mut flags = Vec::new();
    let classes: Vec<ClassMetrics> = (0..cm.n_classes())
        .map(|k| {
            let (tp, tn, fp, fn_) = cm.one_vs_rest(k);
            let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
            let acc = 100.0 * (tp + tn) / total as f64;
            let sen = pct(tp, tp + fn_, k, "SEN", &mut flags);
            let ppv = pct(tp, tp + fp, k, "PPV", &mut flags);
            let spec = pct(tn, tn + fp, k, "SPEC", &mut flags);
            ClassMetrics {
                acc,
                sen,
                f1: harmonic(acc, sen, k, "F1", &mut flags),
                ppv,
                spec,
                f1_standard: harmonic(ppv, sen, k, "F1std", &mut flags),
            }
        })
        .collect();
    let n = classes.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / n;
    let macro_avg = ClassMetrics {
        acc: mean(|c| c.acc),
        sen: mean(|c| c.sen),
        f1: mean(|c| c.f1),
        ppv: mean(|c| c.ppv),
        spec: mean(|c| c.spec),
        f1_standard: mean(|c| c.f1_standard),
    };
    Ok(ClassReport {
        classes,
        macro_avg,
        zero_division: flags,
    })
}

/// Conventional precision/recall F1 per class, with zero-division flags.
pub fn standard_f1(cm: &ConfusionMatrix) -> Vec<(f64, bool)> {
    (0..cm.n_classes())
        .map(|k| {
            let (tp, _, fp, fn_) = cm.one_vs_rest(k);
            let mut flags = Vec::new();
            let sen = pct(tp as f64, (tp + fn_) as f64, k, "SEN", &mut flags);
            let ppv = pct(tp as f64, (tp + fp) as f64, k, "PPV", &mut flags);
            if tp == 0 {
                return (0.0, true);
            }
            (harmonic(ppv, sen, k, "F1std", &mut flags), !flags.is_empty())
        })
        .collect()
}

/// Rounds half away from zero to `decimals` places.
pub fn round_half_up(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    // nudge by a few ulps so values like 99.535 printed from binary land upward
    let scaled = x * f;
    (scaled + scaled.signum() * 1e-9).round() / f
}

type Column = (&'static str, fn(&ClassMetrics) -> f64);

const COLUMNS: [Column; 6] = [
    ("ACC", |c| c.acc),
    ("SEN", |c| c.sen),
    ("F1", |c| c.f1),
    ("PPV", |c| c.ppv),
    ("SPEC", |c| c.spec),
    ("F1std", |c| c.f1_standard),
];

impl ClassReport {
    /// Aligned plain-text table, one row per class plus the macro average.
    pub fn to_text(&self, names: &[String]) -> String {
        let width = names.iter().map(String::len).max().unwrap_or(0).max(9);
        let mut s = format!("{:<width$}", "class");
        for (h, _) in COLUMNS {
            write!(s, " {h:>8}").unwrap();
        }
        s.push('\n');
        let rows = names.iter().map(String::as_str).zip(&self.classes);
        for (name, m) in rows.chain(std::iter::once(("macro-avg", &self.macro_avg))) {
            write!(s, "{name:<width$}").unwrap();
            for (_, f) in COLUMNS {
                write!(s, " {:>8.2}", round_half_up(f(m), 2)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("class");
        for (h, _) in COLUMNS {
            write!(s, ",{h}").unwrap();
        }
        s.push('\n');
        let rows = names.iter().map(String::as_str).zip(&self.classes);
        for (name, m) in rows.chain(std::iter::once(("macro-avg", &self.macro_avg))) {
            s.push_str(name);
            for (_, f) in COLUMNS {
                write!(s, ",{:.2}", round_half_up(f(m), 2)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}
