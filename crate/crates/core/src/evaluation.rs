//! Confusion matrices, completeness / correctness and overall accuracy.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::labels::{ClassIndex, Layer};

/// Rows are reference classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    layer: Layer,
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(layer: Layer, n_classes: usize) -> Self {
        ConfusionMatrix {
            layer,
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_counts(layer: Layer, rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::domain("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            layer,
            n,
            counts: rows.concat(),
        })
    }

    pub fn layer(&self) -> Layer {
        self.layer
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.n + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.n..(c + 1) * self.n].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|r| self.get(r, c)).sum()
    }

    /// Adds one count per site where `mask` is unset or true.
    pub fn accumulate(
        &mut self,
        reference: &Grid<ClassIndex>,
        predicted: &Grid<ClassIndex>,
        mask: Option<&Grid<bool>>,
    ) -> Result<()> {
        if !reference.same_shape(predicted) || mask.is_some_and(|m| !m.same_shape(reference)) {
            return Err(Error::domain("reference, prediction and mask differ in size"));
        }
        for (i, (&r, &p)) in reference.as_slice().iter().zip(predicted.as_slice()).enumerate() {
            if mask.is_some_and(|m| !m.as_slice()[i]) {
                continue;
            }
            if r as usize >= self.n || p as usize >= self.n {
                return Err(Error::domain(format!("label outside the {} {} classes", self.n, self.layer)));
            }
            self.counts[r as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.layer != self.layer || other.n != self.n {
            return Err(Error::domain("cannot merge confusion matrices of different layers"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::domain(format!("empty {} confusion matrix", self.layer)));
        }
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        Ok(Metrics {
            layer: self.layer,
            completeness: (0..self.n).map(|c| ratio(self.get(c, c), self.row_sum(c))).collect(),
            correctness: (0..self.n).map(|c| ratio(self.get(c, c), self.col_sum(c))).collect(),
            overall_accuracy: self.trace() as f64 / total as f64,
        })
    }
}

/// `None` marks a class that never occurs in the reference (completeness) or
/// the prediction (correctness).
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub layer: Layer,
    pub completeness: Vec<Option<f64>>,
    pub correctness: Vec<Option<f64>>,
    pub overall_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricDelta {
    pub completeness: Vec<Option<f64>>,
    pub correctness: Vec<Option<f64>>,
    pub overall_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    A,
    B,
    Tie,
    Undefined,
}

impl Verdict {
    fn of(delta: Option<f64>) -> Verdict {
        match delta {
            None => Verdict::Undefined,
            Some(d) if d > 0.0 => Verdict::B,
            Some(d) if d < 0.0 => Verdict::A,
            Some(_) => Verdict::Tie,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Metrics of run B minus metrics of run A.
    pub delta: MetricDelta,
    pub completeness_winner: Vec<Verdict>,
    pub correctness_winner: Vec<Verdict>,
    pub overall_winner: Verdict,
}

pub fn compare_runs(a: &ConfusionMatrix, b: &ConfusionMatrix) -> Result<Comparison> {
    if a.layer != b.layer || a.n != b.n {
        return Err(Error::domain("runs cover different layers or class sets"));
    }
    let (ma, mb) = (a.metrics()?, b.metrics()?);
    let diff = |x: &[Option<f64>], y: &[Option<f64>]| -> Vec<Option<f64>> {
        x.iter().zip(y).map(|(p, q)| Some((*q)? - (*p)?)).collect()
    };
    let delta = MetricDelta {
        completeness: diff(&ma.completeness, &mb.completeness),
        correctness: diff(&ma.correctness, &mb.correctness),
        overall_accuracy: mb.overall_accuracy - ma.overall_accuracy,
    };
    Ok(Comparison {
        completeness_winner: delta.completeness.iter().map(|d| Verdict::of(*d)).collect(),
        correctness_winner: delta.correctness.iter().map(|d| Verdict::of(*d)).collect(),
        overall_winner: Verdict::of(Some(delta.overall_accuracy)),
        delta,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Rows per class with Cm/Cr columns for each named run, OA last.
pub fn format_table(class_names: &[String], runs: &[(&str, &Metrics)]) -> String {
    let width = class_names.iter().map(|c| c.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:width$}", "class");
    for (name, _) in runs {
        let _ = write!(out, " | {:>7} {:>7}", format!("{name} Cm"), "Cr");
    }
    out.push('\n');
    for (c, cname) in class_names.iter().enumerate() {
        let _ = write!(out, "{cname:width$}");
        for (_, m) in runs {
            let cm = m.completeness.get(c).copied().flatten();
            let cr = m.correctness.get(c).copied().flatten();
            let _ = write!(out, " | {:>7} {:>7}", pct(cm), pct(cr));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:width$}", "OA");
    for (_, m) in runs {
        let _ = write!(out, " | {:>7} {:>7}", pct(Some(m.overall_accuracy)), "");
    }
    out.push('\n');
    out
}

/// `layer,class,completeness,correctness` rows plus one `layer,OA,<value>,` row per layer.
pub fn metrics_csv(layers: &[(&Metrics, &[String])]) -> String {
    let mut out = String::from("layer,class,completeness,correctness\n");
    let field = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for (m, names) in layers {
        for (c, name) in names.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                m.layer,
                name,
                field(m.completeness.get(c).copied().flatten()),
                field(m.correctness.get(c).copied().flatten())
            );
        }
        let _ = writeln!(out, "{},OA,{:.6},", m.layer, m.overall_accuracy);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(v: &[u16]) -> Grid<u16> {
        Grid::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn identical_labelings_are_diagonal() {
        let mut cm = ConfusionMatrix::new(Layer::Base, 3);
        let g = grid(&[0, 1, 2, 2, 1]);
        cm.accumulate(&g, &g, None).unwrap();
        assert_eq!(cm.trace(), 5);
        assert_eq!(cm.total(), 5);
        let m = cm.metrics().unwrap();
        assert!(m.completeness.iter().chain(&m.correctness).all(|v| *v == Some(1.0)));
        assert_eq!(m.overall_accuracy, 1.0);
    }

    #[test]
    fn mask_and_additivity() {
        let r = grid(&[0, 1, 1, 0]);
        let p = grid(&[0, 0, 1, 1]);
        let mut cm = ConfusionMatrix::new(Layer::Occlusion, 2);
        cm.accumulate(&r, &p, Some(&Grid::filled(4, 1, false))).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.metrics().is_err());

        let mut a = ConfusionMatrix::new(Layer::Occlusion, 2);
        a.accumulate(&r, &p, None).unwrap();
        let mut b = ConfusionMatrix::new(Layer::Occlusion, 2);
        b.accumulate(&p, &p, None).unwrap();
        let mut both = ConfusionMatrix::new(Layer::Occlusion, 2);
        both.accumulate(&r, &p, None).unwrap();
        both.accumulate(&p, &p, None).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, both);
        assert!(cm.accumulate(&r, &grid(&[0]), None).is_err());
    }

    #[test]
    fn absent_class_is_undefined_not_zero() {
        let mut cm = ConfusionMatrix::new(Layer::Base, 3);
        cm.accumulate(&grid(&[0, 1]), &grid(&[1, 1]), None).unwrap();
        let m = cm.metrics().unwrap();
        assert_eq!(m.completeness, vec![Some(0.0), Some(1.0), None]);
        assert_eq!(m.correctness, vec![None, Some(0.5), None]);
    }

    #[test]
    fn comparison_signs() {
        let a = ConfusionMatrix::from_counts(Layer::Base, &[vec![8, 2], vec![2, 8]]).unwrap();
        let b = ConfusionMatrix::from_counts(Layer::Base, &[vec![9, 1], vec![2, 8]]).unwrap();
        let same = compare_runs(&a, &a).unwrap();
        assert_eq!(same.delta.overall_accuracy, 0.0);
        assert!(same.delta.completeness.iter().all(|d| *d == Some(0.0)));
        let c = compare_runs(&a, &b).unwrap();
        assert!((c.delta.overall_accuracy - 0.05).abs() < 1e-12);
        assert_eq!(c.overall_winner, Verdict::B);
        assert_eq!(c.completeness_winner, vec![Verdict::B, Verdict::Tie]);
        let other = ConfusionMatrix::new(Layer::Occlusion, 2);
        assert!(compare_runs(&a, &other).is_err());
    }

    #[test]
    fn csv_and_table_layout() {
        let cm = ConfusionMatrix::from_counts(Layer::Base, &[vec![50, 10], vec![5, 35]]).unwrap();
        let m = cm.metrics().unwrap();
        let names = vec!["road".to_string(), "grass".to_string()];
        let csv = metrics_csv(&[(&m, &names)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,class,completeness,correctness");
        assert_eq!(lines[1], "base,road,0.833333,0.909091");
        assert_eq!(lines[3], "base,OA,0.850000,");
        let table = format_table(&names, &[("CRF", &m), ("tCRF", &m)]);
        assert!(table.contains("83.3") && table.lines().last().unwrap().contains("85.0"));
    }

    proptest! {
        #[test]
        fn oa_is_weighted_mean_of_completeness(cells in proptest::collection::vec(0u64..50, 16)) {
            let rows: Vec<Vec<u64>> = cells.chunks(4).map(|c| c.to_vec()).collect();
            let cm = ConfusionMatrix::from_counts(Layer::Base, &rows).unwrap();
            prop_assume!(cm.total() > 0);
            let m = cm.metrics().unwrap();
            let weighted: f64 = (0..4)
                .filter_map(|c| m.completeness[c].map(|v| v * cm.row_sum(c) as f64))
                .sum::<f64>() / cm.total() as f64;
            prop_assert!((weighted - m.overall_accuracy).abs() < 1e-12);
            for v in m.completeness.iter().chain(&m.correctness).flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn permutation_equivariance(cells in proptest::collection::vec(1u64..50, 9), perm in Just([2usize, 0, 1])) {
            let rows: Vec<Vec<u64>> = cells.chunks(3).map(|c| c.to_vec()).collect();
            let permuted: Vec<Vec<u64>> = (0..3).map(|r| (0..3).map(|c| rows[perm[r]][perm[c]]).collect()).collect();
            let m = ConfusionMatrix::from_counts(Layer::Base, &rows).unwrap().metrics().unwrap();
            let mp = ConfusionMatrix::from_counts(Layer::Base, &permuted).unwrap().metrics().unwrap();
            prop_assert_eq!(m.overall_accuracy, mp.overall_accuracy);
            for k in 0..3 {
                prop_assert_eq!(mp.completeness[k], m.completeness[perm[k]]);
                prop_assert_eq!(mp.correctness[k], m.correctness[perm[k]]);
            }
        }
    }
}
