use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::metrics::{mean, ndcg_name, ndcg_per_user, recall_name, recall_per_user, RankedLists};
use crate::error::{Error, Result};

/// Metrics of one trained model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: String,
    pub seed: u64,
    pub ks: Vec<usize>,
    pub users: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Per-user values keyed like `metrics`, in user order.
    pub per_user: BTreeMap<String, Vec<f64>>,
}

impl RunMetrics {
    pub fn compute(variant: &str, seed: u64, lists: &RankedLists, targets: &[u32], ks: &[usize]) -> Result<Self> {
        let mut metrics = BTreeMap::new();
        let mut per_user = BTreeMap::new();
        for &k in ks {
            let r = recall_per_user(lists, targets, k)?;
            let n = ndcg_per_user(lists, targets, k)?;
            metrics.insert(recall_name(k), mean(&r));
            metrics.insert(ndcg_name(k), mean(&n));
            per_user.insert(recall_name(k), r);
            per_user.insert(ndcg_name(k), n);
        }
        let m = Self {
            variant: variant.to_string(),
            seed,
            ks: ks.to_vec(),
            users: targets.len(),
            metrics,
            per_user,
        };
        m.check_invariants()?;
        Ok(m)
    }

    /// Bounds in [0, 1], recall monotone in k, NDCG at most recall.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Precondition(format!("metric invariant violated: {msg}")));
        for (name, &v) in &self.metrics {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v}"));
            }
        }
        let mut ks = self.ks.clone();
        ks.sort_unstable();
        for w in ks.windows(2) {
            let (a, b) = (self.metrics[&recall_name(w[0])], self.metrics[&recall_name(w[1])]);
            if a > b {
                return bad(format!("R@{} = {a} > R@{} = {b}", w[0], w[1]));
            }
        }
        for &k in &ks {
            let (r, n) = (self.metrics[&recall_name(k)], self.metrics[&ndcg_name(k)]);
            if n > r + 1e-12 {
                return bad(format!("N@{k} = {n} > R@{k} = {r}"));
            }
        }
        Ok(())
    }

    /// Metric JSON without per-user values.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "variant": self.variant,
            "seed": self.seed,
            "users": self.users,
            "metrics": self.metrics,
        })
    }
}

/// Two-sided paired t-test; returns (mean difference, p-value).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Precondition(format!("paired test needs two equal samples of size >= 2, got {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok((m, if m == 0.0 { 1.0 } else { 0.0 }));
    }
    let t = m / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Precondition(e.to_string()))?;
    Ok((m, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    /// Baseline minus variant, pooled over paired (seed, user) values.
    pub gap: BTreeMap<String, f64>,
    pub p_value: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub baseline: String,
    pub metric_names: Vec<String>,
    pub runs: Vec<RunMetrics>,
    pub summary: Vec<VariantSummary>,
}

impl MetricReport {
    /// Aggregates runs per variant (in first-seen order) and tests each
    /// variant against `baseline`, pairing values by seed and user.
    pub fn from_runs(runs: Vec<RunMetrics>, baseline: &str) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::EmptyDataset("no runs to report".into()))?;
        let metric_names: Vec<String> = first.metrics.keys().cloned().collect();
        for r in &runs {
            r.check_invariants()?;
            if r.metrics.keys().ne(metric_names.iter()) {
                return Err(Error::Misaligned(format!("run {}/{} reports different metrics", r.variant, r.seed)));
            }
        }
        let mut order: Vec<&str> = Vec::new();
        for r in &runs {
            if !order.contains(&r.variant.as_str()) {
                order.push(&r.variant);
            }
        }
        let of = |v: &str| runs.iter().filter(|r| r.variant == v).collect::<Vec<_>>();
        let base = of(baseline);
        let mut summary = Vec::new();
        for v in &order {
            let rs = of(v);
            let mut s = VariantSummary {
                variant: v.to_string(),
                seeds: rs.iter().map(|r| r.seed).collect(),
                mean: BTreeMap::new(),
                std: BTreeMap::new(),
                gap: BTreeMap::new(),
                p_value: BTreeMap::new(),
            };
            for name in &metric_names {
                let vals: Vec<f64> = rs.iter().map(|r| r.metrics[name]).collect();
                let m = mean(&vals);
                let sd = if vals.len() > 1 {
                    (vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
                s.mean.insert(name.clone(), m);
                s.std.insert(name.clone(), sd);
                if *v == baseline {
                    continue;
                }
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for r in &rs {
                    if let Some(br) = base.iter().find(|x| x.seed == r.seed) {
                        if br.users == r.users {
                            a.extend_from_slice(&br.per_user[name]);
                            b.extend_from_slice(&r.per_user[name]);
                        }
                    }
                }
                if a.len() >= 2 {
                    let (gap, p) = paired_t_test(&a, &b)?;
                    s.gap.insert(name.clone(), gap);
                    s.p_value.insert(name.clone(), p);
                }
            }
            summary.push(s);
        }
        Ok(Self {
            baseline: baseline.to_string(),
            metric_names,
            runs,
            summary,
        })
    }

    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == name)
    }

    /// Metric JSON without per-user values.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "baseline": self.baseline,
            "metric_names": self.metric_names,
            "runs": self.runs.iter().map(RunMetrics::summary_json).collect::<Vec<_>>(),
            "summary": self.summary,
        })
    }

    /// Variants as rows, mean ± std per metric; `*` marks p < 0.05 against
    /// the baseline.
    pub fn to_markdown(&self) -> String {
        let names = ordered_names(&self.metric_names);
        let mut s = String::from("| Variant | Seeds |");
        for n in &names {
            let _ = write!(s, " {n} |");
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---:|".repeat(names.len()));
        s.push('\n');
        for v in &self.summary {
            let _ = write!(s, "| {} | {} |", v.variant, v.seeds.len());
            for n in &names {
                let star = v.p_value.get(n).is_some_and(|&p| p < 0.05);
                let _ = write!(s, " {:.4} ± {:.4}{} |", v.mean[n], v.std[n], if star { "*" } else { "" });
            }
            s.push('\n');
        }
        let _ = writeln!(s, "\n`*`: paired t-test against `{}` over (seed, user) pairs, p < 0.05.", self.baseline);
        s
    }
}

/// R@k before N@k, each by increasing k.
pub fn ordered_names(names: &[String]) -> Vec<String> {
    let mut v = names.to_vec();
    v.sort_by_key(|n| {
        let (kind, k) = n.split_once('@').unwrap_or((n, "0"));
        (kind != "R", k.parse::<usize>().unwrap_or(0))
    });
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_test_matches_reference_value() {
        // d = [1, 2, 3, 4, 5] - [0, 0, 0, 0, 0]: t = 3 / sqrt(2.5 / 5), df = 4.
        let (gap, p) = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert_eq!(gap, 3.0);
        assert!((p - 0.013_235_60).abs() < 1e-6, "{p}");
        assert_eq!(paired_t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap().1, 1.0);
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn report_aggregates_and_pairs() {
        let lists = RankedLists::full(vec![vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10]; 4]).unwrap();
        let good = RunMetrics::compute("full", 1, &lists, &[1, 2, 3, 4], &[5, 10]).unwrap();
        let bad = RunMetrics::compute("s", 1, &lists, &[1, 20, 30, 40], &[5, 10]).unwrap();
        let rep = MetricReport::from_runs(vec![good, bad], "full").unwrap();
        assert_eq!(rep.metric_names, vec!["N@10", "N@5", "R@10", "R@5"]);
        let s = rep.variant("s").unwrap();
        assert_eq!(s.mean["R@10"], 0.25);
        assert_eq!(s.gap["R@10"], 0.75);
        assert!(rep.variant("full").unwrap().p_value.is_empty());
        let md = rep.to_markdown();
        assert!(md.starts_with("| Variant | Seeds | R@5 | R@10 | N@5 | N@10 |"));
    }

    #[test]
    fn invariants_reject_inconsistent_metrics() {
        let lists = RankedLists::full(vec![vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10]]).unwrap();
        let mut m = RunMetrics::compute("full", 0, &lists, &[7], &[5, 10]).unwrap();
        assert!(m.check_invariants().is_ok());
        m.metrics.insert("R@10".into(), 0.0);
        assert!(m.check_invariants().is_err());
    }
}
