//! Aggregation of per-run results and CSV emission.
//!
//! CSV dialect: comma-separated, one header row, `.` decimal point, LF line
//! endings, numbers in Rust's shortest round-trip form, empty field for an
//! undefined transferability.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attack::AttackRow;
use crate::error::{Error, Result};
use crate::network::LayerMse;

/// Everything measured for one (run, subset size, β) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub run_seed: u64,
    pub subset_size: usize,
    pub beta: f64,
    pub mse: LayerMse,
    /// Empty when attacks were not evaluated for this cell.
    pub attack: Vec<AttackRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    WeightMse,
    MseW1,
    MseB1,
    MseW2,
    MseB2,
    MseWeightsOnly,
    WbRelAcc,
    BbRelAcc,
    Transferability,
    CleanAccOracle,
    CleanAccSurrogate,
}

impl Metric {
    pub const MSE: [Metric; 6] = [
        Metric::WeightMse,
        Metric::MseW1,
        Metric::MseB1,
        Metric::MseW2,
        Metric::MseB2,
        Metric::MseWeightsOnly,
    ];
    pub const ACCURACY: [Metric; 4] = [
        Metric::WbRelAcc,
        Metric::BbRelAcc,
        Metric::CleanAccOracle,
        Metric::CleanAccSurrogate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::WeightMse => "weight_mse",
            Metric::MseW1 => "mse_w1",
            Metric::MseB1 => "mse_b1",
            Metric::MseW2 => "mse_w2",
            Metric::MseB2 => "mse_b2",
            Metric::MseWeightsOnly => "mse_weights_only",
            Metric::WbRelAcc => "wb_rel_acc",
            Metric::BbRelAcc => "bb_rel_acc",
            Metric::Transferability => "transferability",
            Metric::CleanAccOracle => "clean_acc_oracle",
            Metric::CleanAccSurrogate => "clean_acc_surrogate",
        }
    }

    pub fn parse(s: &str) -> Result<Metric> {
        Metric::MSE
            .iter()
            .chain(&Metric::ACCURACY)
            .chain(&[Metric::Transferability])
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown metric {s:?}")))
    }
}

/// Summary statistics of one metric over runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub metric: Metric,
    pub subset_size: usize,
    pub beta: f64,
    /// `None` for metrics that do not depend on ε.
    pub epsilon: Option<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GroupKey {
    metric: Metric,
    subset_size: usize,
    beta: f64,
    epsilon: Option<f64>,
}

impl Eq for GroupKey {}

impl Ord for GroupKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.metric
            .cmp(&other.metric)
            .then(self.subset_size.cmp(&other.subset_size))
            .then(self.beta.total_cmp(&other.beta))
            .then(match (self.epsilon, other.epsilon) {
                (Some(a), Some(b)) => a.total_cmp(&b),
                (a, b) => a.is_some().cmp(&b.is_some()),
            })
    }
}

impl PartialOrd for GroupKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Mean and sample standard deviation, summed in sorted order so the result
/// does not depend on input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

/// Groups by (metric, subset size, β, ε) and summarizes over runs.
pub fn aggregate(results: &[ExperimentResult]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    let mut push = |metric, r: &ExperimentResult, epsilon, value: f64| {
        groups
            .entry(GroupKey {
                metric,
                subset_size: r.subset_size,
                beta: r.beta,
                epsilon,
            })
            .or_default()
            .push(value);
    };
    for r in results {
        let m = r.mse;
        for (metric, v) in
            Metric::MSE
                .iter()
                .zip([m.pooled, m.w1, m.b1, m.w2, m.b2, m.weights_only])
        {
            push(*metric, r, None, v);
        }
        for row in &r.attack {
            let e = Some(row.epsilon);
            push(Metric::WbRelAcc, r, e, row.wb_rel_acc);
            push(Metric::BbRelAcc, r, e, row.bb_rel_acc);
            push(Metric::CleanAccOracle, r, e, row.clean_acc_oracle);
            push(Metric::CleanAccSurrogate, r, e, row.clean_acc_surrogate);
            if let Some(t) = row.transferability {
                push(Metric::Transferability, r, e, t);
            }
        }
    }
    groups
        .into_iter()
        .map(|(k, values)| {
            let (mean, std) = mean_std(&values);
            AggregateRow {
                metric: k.metric,
                subset_size: k.subset_size,
                beta: k.beta,
                epsilon: k.epsilon,
                mean,
                std,
                count: values.len(),
            }
        })
        .collect()
}

/// Relative MSE drop from β = 0 to β > 0 at the same subset size.
pub fn mse_reduction(beta0: &AggregateRow, beta1: &AggregateRow) -> Result<f64> {
    if beta0.subset_size != beta1.subset_size {
        return Err(Error::Argument(format!(
            "subset sizes differ: {} vs {}",
            beta0.subset_size, beta1.subset_size
        )));
    }
    if beta0.mean == 0.0 {
        return Err(Error::UndefinedMetric(
            "MSE reduction from a zero baseline".into(),
        ));
    }
    Ok((beta0.mean - beta1.mean) / beta0.mean)
}

/// Finds one aggregate row.
pub fn find(
    rows: &[AggregateRow],
    metric: Metric,
    subset_size: usize,
    beta: f64,
    epsilon: Option<f64>,
) -> Option<&AggregateRow> {
    rows.iter().find(|r| {
        r.metric == metric && r.subset_size == subset_size && r.beta == beta && r.epsilon == epsilon
    })
}

pub const MSE_TABLE: &str = "mse_vs_size.csv";
pub const REL_ACC_TABLE: &str = "rel_acc_vs_eps.csv";
pub const TRANSFER_TABLE: &str = "transfer_vs_size.csv";
pub const METADATA_FILE: &str = "metadata.txt";

const MSE_HEADER: &str = "metric,subset_size,beta,mean,std,count";
const REL_ACC_HEADER: &str = "metric,subset_size,beta,epsilon,mean,std,count";
const TRANSFER_HEADER: &str = "subset_size,beta,epsilon,mean,std,count";

fn table_text(
    rows: &[AggregateRow],
    header: &str,
    keep: impl Fn(&AggregateRow) -> bool,
    with_metric: bool,
) -> String {
    let mut out = format!("{header}\n");
    for r in rows.iter().filter(|r| keep(r)) {
        if with_metric {
            write!(out, "{},", r.metric.name()).unwrap();
        }
        write!(out, "{},{},", r.subset_size, r.beta).unwrap();
        if let Some(e) = r.epsilon {
            write!(out, "{e},").unwrap();
        }
        writeln!(out, "{},{},{}", r.mean, r.std, r.count).unwrap();
    }
    out
}

/// Writes the three summary tables plus a metadata file; returns the paths written.
pub fn emit_tables(
    agg: &[AggregateRow],
    out_dir: impl AsRef<Path>,
    metadata: &str,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (
            MSE_TABLE,
            table_text(agg, MSE_HEADER, |r| Metric::MSE.contains(&r.metric), true),
        ),
        (
            REL_ACC_TABLE,
            table_text(
                agg,
                REL_ACC_HEADER,
                |r| Metric::ACCURACY.contains(&r.metric),
                true,
            ),
        ),
        (
            TRANSFER_TABLE,
            table_text(
                agg,
                TRANSFER_HEADER,
                |r| r.metric == Metric::Transferability,
                false,
            ),
        ),
        (METADATA_FILE, metadata.to_string()),
    ];
    let mut manifest = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        crate::write_atomic(&path, text.as_bytes())?;
        manifest.push(path);
    }
    Ok(manifest)
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Argument(format!("cannot parse {what} from {s:?}")))
}

/// Reads back any of the three summary tables.
pub fn parse_table(text: &str) -> Result<Vec<AggregateRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Argument("empty table".into()))?;
    let (with_metric, with_eps) = match header {
        MSE_HEADER => (true, false),
        REL_ACC_HEADER => (true, true),
        TRANSFER_HEADER => (false, true),
        other => return Err(Error::Argument(format!("unknown table header {other:?}"))),
    };
    lines
        .map(|line| {
            let mut f = line.split(',');
            let mut next = |what| {
                f.next()
                    .ok_or_else(|| Error::Argument(format!("missing {what} in {line:?}")))
            };
            let metric = if with_metric {
                Metric::parse(next("metric")?)?
            } else {
                Metric::Transferability
            };
            let subset_size = parse_field(next("subset_size")?, "subset_size")?;
            let beta = parse_field(next("beta")?, "beta")?;
            let epsilon = if with_eps {
                Some(parse_field(next("epsilon")?, "epsilon")?)
            } else {
                None
            };
            Ok(AggregateRow {
                metric,
                subset_size,
                beta,
                epsilon,
                mean: parse_field(next("mean")?, "mean")?,
                std: parse_field(next("std")?, "std")?,
                count: parse_field(next("count")?, "count")?,
            })
        })
        .collect()
}

pub const MSE_RESULTS_HEADER: &str =
    "run_seed,subset_size,beta,weight_mse,mse_w1,mse_b1,mse_w2,mse_b2,mse_weights_only";
pub const ATTACK_RESULTS_HEADER: &str = "run_seed,subset_size,beta,epsilon,wb_rel_acc,bb_rel_acc,transferability,clean_acc_oracle,clean_acc_surrogate";

pub fn mse_row(run_seed: u64, subset_size: usize, beta: f64, m: &LayerMse) -> String {
    format!(
        "{run_seed},{subset_size},{beta},{},{},{},{},{},{}\n",
        m.pooled, m.w1, m.b1, m.w2, m.b2, m.weights_only
    )
}

pub fn attack_rows(run_seed: u64, subset_size: usize, beta: f64, rows: &[AttackRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let tr = r.transferability.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{run_seed},{subset_size},{beta},{},{},{},{tr},{},{}",
            r.epsilon, r.wb_rel_acc, r.bb_rel_acc, r.clean_acc_oracle, r.clean_acc_surrogate
        )
        .unwrap();
    }
    out
}

/// Rebuilds results from the per-cell CSVs (`weight_mse.csv`, `attack.csv`).
pub fn parse_results(mse_csv: &str, attack_csv: &str) -> Result<Vec<ExperimentResult>> {
    let mut results: BTreeMap<(u64, usize, u64), ExperimentResult> = BTreeMap::new();
    for line in mse_csv.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Argument(format!("bad weight-MSE row {line:?}")));
        }
        let num = |i: usize| parse_field::<f64>(f[i], "mse");
        let r = ExperimentResult {
            run_seed: parse_field(f[0], "run_seed")?,
            subset_size: parse_field(f[1], "subset_size")?,
            beta: parse_field(f[2], "beta")?,
            mse: LayerMse {
                pooled: num(3)?,
                w1: num(4)?,
                b1: num(5)?,
                w2: num(6)?,
                b2: num(7)?,
                weights_only: num(8)?,
            },
            attack: Vec::new(),
        };
        results.insert((r.run_seed, r.subset_size, r.beta.to_bits()), r);
    }
    for line in attack_csv.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Argument(format!("bad attack row {line:?}")));
        }
        let key = (
            parse_field(f[0], "run_seed")?,
            parse_field(f[1], "subset_size")?,
            parse_field::<f64>(f[2], "beta")?.to_bits(),
        );
        let row = AttackRow {
            epsilon: parse_field(f[3], "epsilon")?,
            wb_rel_acc: parse_field(f[4], "wb_rel_acc")?,
            bb_rel_acc: parse_field(f[5], "bb_rel_acc")?,
            transferability: if f[6].is_empty() {
                None
            } else {
                Some(parse_field(f[6], "transferability")?)
            },
            clean_acc_oracle: parse_field(f[7], "clean_acc_oracle")?,
            clean_acc_surrogate: parse_field(f[8], "clean_acc_surrogate")?,
        };
        results
            .get_mut(&key)
            .ok_or_else(|| {
                Error::Argument(format!("attack row without a weight-MSE row: {line:?}"))
            })?
            .attack
            .push(row);
    }
    Ok(results.into_values().collect())
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn aggregation_is_permutation_invariant(
            vals in prop::collection::vec((0usize..3, 0.0f64..1.0), 1..30),
            seed in any::<u64>(),
        ) {
            let rows: Vec<ExperimentResult> = vals
                .iter()
                .enumerate()
                .map(|(i, &(size, v))| ExperimentResult {
                    run_seed: i as u64,
                    subset_size: size * 10,
                    beta: 0.0,
                    mse: LayerMse { w1: v, b1: v, w2: v, b2: v, weights_only: v, pooled: v },
                    attack: Vec::new(),
                })
                .collect();
            let mut shuffled = rows.clone();
            crate::numerics::SeededRng::new(seed).shuffle(&mut shuffled);
            prop_assert_eq!(aggregate(&rows), aggregate(&shuffled));
        }
    }
}
