//! Evaluation report: prediction quality against the baselines and the
//! effect of the collision constraint, rendered as fixed-width text.

use std::fmt::Write as _;

use ccmotion::bench::EvalReport;

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub dataset: String,
    pub test_pairs: usize,
    pub epsilon: f64,
    /// Cost above which a mixture counts toward CVP: ε plus the solver's
    /// constraint tolerance.
    pub threshold: f64,
    pub cv: EvalReport,
    pub nn_naive: EvalReport,
    /// Unoptimized learned mixtures on the whole test set.
    pub prior: EvalReport,
    pub optimized: EvalReport,
    /// Number of test priors with cost above ε, i.e. those the optimizer reshapes.
    pub violating: usize,
    /// Prior and optimized metrics restricted to the violating cases.
    pub violating_prior: Option<EvalReport>,
    pub violating_optimized: Option<EvalReport>,
    pub feasible: usize,
    pub max_optimized_cost: f64,
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |v| format!("{v:.digits$}"))
}

fn row(out: &mut String, label: &str, n: usize, r: Option<&EvalReport>, with_cvp: bool) {
    let _ = write!(
        out,
        "{label:<24}{n:>6}{:>10}{:>10}{:>10}",
        cell(r.map(|r| r.ade), 4),
        cell(r.map(|r| r.fde), 4),
        cell(r.and_then(|r| r.al), 5),
    );
    if with_cvp {
        let _ = write!(out, "{:>9}", cell(r.and_then(|r| r.cvp), 2));
    }
    out.push('\n');
}

impl Report {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ccmotion evaluation report");
        let _ = writeln!(out, "dataset: {}", self.dataset);
        let _ = writeln!(out, "test pairs: {}", self.test_pairs);
        let _ = writeln!(out, "epsilon: {}", self.epsilon);
        let _ = writeln!(out, "CVP threshold: {:.6}", self.threshold);
        out.push('\n');

        let _ = writeln!(out, "Table 1. Prediction quality on the test set");
        let _ = writeln!(out, "{:<24}{:>6}{:>10}{:>10}{:>10}", "method", "n", "ADE", "FDE", "AL");
        row(&mut out, "CV", self.test_pairs, Some(&self.cv), false);
        row(&mut out, "NN-naive", self.test_pairs, Some(&self.nn_naive), false);
        row(&mut out, "Ours", self.test_pairs, Some(&self.prior), false);
        out.push('\n');

        let _ = writeln!(out, "Table 2. Constraint compliance (CVP in %)");
        let _ = writeln!(
            out,
            "{:<24}{:>6}{:>10}{:>10}{:>10}{:>9}",
            "predictions", "n", "ADE", "FDE", "AL", "CVP"
        );
        row(&mut out, "all, unoptimized", self.test_pairs, Some(&self.prior), true);
        row(&mut out, "all, optimized", self.test_pairs, Some(&self.optimized), true);
        row(&mut out, "violating, unoptimized", self.violating, self.violating_prior.as_ref(), true);
        row(&mut out, "violating, optimized", self.violating, self.violating_optimized.as_ref(), true);
        out.push('\n');
        let _ = writeln!(out, "feasible after optimization: {}/{}", self.feasible, self.violating);
        let _ = writeln!(out, "max optimized cost: {:.6}", self.max_optimized_cost);
        out
    }
}
