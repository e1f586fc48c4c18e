use crate::linop::AggOperator;
use crate::loss::LossKind;
use crate::problem::{Problem, ProblemSpec};

use super::{RakingData, RowKind, TableError};

/// Where logistic bounds come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bounds {
    None,
    /// The same interval for every cell.
    Scalar {
        lower: f64,
        upper: f64,
    },
    /// Per-row bound columns of the table.
    Columns,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub bounds: Bounds,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig { kind, bounds: Bounds::None }
    }

    pub fn logistic(lower: f64, upper: f64) -> Self {
        LossConfig { kind: LossKind::Logistic, bounds: Bounds::Scalar { lower, upper } }
    }
}

/// Compile parsed rows into a [`Problem`].
///
/// Constraint rows become `A` (labelled by their row number), aggregate
/// observations become `B`. When an aggregate observation has no bounds of
/// its own under the logistic loss, it takes the sum of its members' bounds.
pub fn build_problem(data: &RakingData, cfg: &LossConfig) -> Result<Problem, TableError> {
    let p = data.n_cells();
    if p == 0 {
        return Err(TableError::EmptyProblem);
    }
    let logistic = cfg.kind == LossKind::Logistic;
    let mut cell_bounds = vec![(f64::NAN, f64::NAN); p];
    let mut observed: Vec<(usize, f64, f64)> = Vec::new();
    let mut a_rows = Vec::new();
    let mut s = Vec::new();
    let mut labels = Vec::new();
    let mut b_rows = Vec::new();
    let mut b_vals = Vec::new();
    let mut agg_bounds = Vec::new();

    for (r, row) in data.rows.iter().enumerate() {
        let own = match cfg.bounds {
            Bounds::Scalar { lower, upper } => (Some(lower), Some(upper)),
            Bounds::Columns => (row.lower, row.upper),
            Bounds::None => (None, None),
        };
        match data.kind(row) {
            RowKind::Observed | RowKind::Missing => {
                let i = data.cell_index(row).expect("granular row");
                if let (Some(l), Some(u)) = own {
                    cell_bounds[i] = (l, u);
                }
                if let (RowKind::Observed, Some(v)) = (data.kind(row), row.value) {
                    observed.push((i, v, row.weight));
                }
            }
            RowKind::Constraint => {
                a_rows.push(data.members(row));
                s.push(row.value.expect("checked at parse time"));
                labels.push(r);
            }
            RowKind::AggregateObservation => {
                b_rows.push(data.members(row));
                b_vals.push((row.value.expect("checked at parse time"), row.weight));
                // scalar bounds are per cell, so aggregates always use member sums
                agg_bounds.push(match cfg.bounds {
                    Bounds::Columns => (row.lower, row.upper),
                    _ => (None, None),
                });
            }
        }
    }
    observed.sort_by_key(|o| o.0);
    let obs_idx: Vec<usize> = observed.iter().map(|o| o.0).collect();
    if obs_idx.is_empty() {
        return Err(TableError::EmptyProblem);
    }

    let a = AggOperator::new(a_rows, p).map_err(crate::problem::ProblemError::from)?;
    let b = AggOperator::new(b_rows, p).map_err(crate::problem::ProblemError::from)?;
    let mut spec = ProblemSpec::new(cfg.kind, observed.iter().map(|o| o.1).collect(), a, s)
        .weights(observed.iter().map(|o| o.2).collect())
        .observed(obs_idx.clone(), p)
        .shape(data.shape());
    spec.a_labels = Some(labels);
    let (s_b, w_b): (Vec<f64>, Vec<f64>) = b_vals.into_iter().unzip();
    spec = spec.aggregate_observations(b.clone(), s_b, w_b);

    if logistic {
        if cfg.bounds == Bounds::None {
            return Err(TableError::BoundsInvalid("logistic loss needs bounds".into()));
        }
        let mut lo = Vec::with_capacity(obs_idx.len());
        let mut hi = Vec::with_capacity(obs_idx.len());
        for &i in &obs_idx {
            let (l, u) = cell_bounds[i];
            if !(l < u) {
                return Err(TableError::BoundsInvalid(format!(
                    "cell {:?}: lower {l} must be below upper {u}",
                    data.cell_labels(i)
                )));
            }
            lo.push(l);
            hi.push(u);
        }
        let mut blo = Vec::new();
        let mut bhi = Vec::new();
        for (k, members) in b.rows().iter().enumerate() {
            let (l, u) = match agg_bounds[k] {
                (Some(l), Some(u)) => (l, u),
                _ => members.iter().fold((0.0, 0.0), |(l, u), &c| (l + cell_bounds[c].0, u + cell_bounds[c].1)),
            };
            if !(l < u) {
                return Err(TableError::BoundsInvalid(format!(
                    "aggregate observation {k}: lower {l} must be below upper {u}"
                )));
            }
            blo.push(l);
            bhi.push(u);
        }
        spec = spec.bounds(lo, hi);
        if b.nrows() > 0 {
            spec = spec.aggregate_bounds(blo, bhi);
        }
    }
    Ok(spec.compile()?)
}

#[cfg(test)]
mod tests {
    use super::super::tests::table1;
    use super::super::{parse_table, read_csv, DimDecl, Schema};
    use super::*;

    fn schema2() -> Schema {
        Schema::new(vec![DimDecl::new("X1"), DimDecl::new("X2")])
    }

    #[test]
    fn table1_problem() {
        let (h, r) = table1();
        let data = parse_table(&h, &r, &schema2()).unwrap();
        let p = build_problem(&data, &LossConfig::new(LossKind::Entropic)).unwrap();
        assert_eq!(p.p(), 4);
        assert_eq!(p.a().nrows(), 2);
        assert_eq!(p.b().nrows(), 1);
        assert_eq!(p.observed(), &[0, 1, 2]);
        assert_eq!(p.missing(), &[3]);
        assert_eq!(p.s(), &[4.0, 7.0]);
        assert_eq!(p.s_b(), &[5.0]);
        let dense = p.a().assemble_dense().unwrap();
        assert_eq!(dense.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(p.a_labels(), &[4, 5]);
    }

    #[test]
    fn two_by_two_full_margins() {
        let text = "X1,X2,value,weights\n1,1,1,1\n1,2,2,1\n2,1,3,1\n2,2,4,1\n\
                    1,0,3,inf\n2,0,7,inf\n0,1,4,inf\n0,2,6,inf\n";
        let data = read_csv(text.as_bytes(), &schema2()).unwrap();
        let p = build_problem(&data, &LossConfig::new(LossKind::Chi2)).unwrap();
        assert_eq!(p.a_full().nrows(), 4);
        assert_eq!(p.a().nrows(), 3);
    }

    #[test]
    fn inconsistent_margins_name_rows() {
        let text = "X1,X2,value,weights\n1,1,1,1\n1,2,2,1\n2,1,3,1\n2,2,4,1\n\
                    1,0,3,inf\n2,0,7,inf\n0,1,4,inf\n0,2,7,inf\n";
        let data = read_csv(text.as_bytes(), &schema2()).unwrap();
        let err = build_problem(&data, &LossConfig::new(LossKind::Chi2)).unwrap_err();
        assert!(err.to_string().contains("constraint 7"), "{err}");
    }

    #[test]
    fn multi_sentinel_and_three_dims() {
        let mut text = String::from("a,b,c,value,weights\n");
        for i in 1..=3 {
            for j in 1..=4 {
                for k in 1..=5 {
                    text.push_str(&format!("{i},{j},{k},1,1\n"));
                }
            }
        }
        for i in 1..=3 {
            for j in 1..=4 {
                text.push_str(&format!("{i},{j},0,5,inf\n"));
            }
        }
        for i in 1..=3 {
            for k in 1..=5 {
                text.push_str(&format!("{i},0,{k},4,inf\n"));
            }
        }
        for j in 1..=4 {
            for k in 1..=5 {
                text.push_str(&format!("0,{j},{k},3,inf\n"));
            }
        }
        text.push_str("0,0,0,60,inf\n");
        let schema = Schema::new(vec![DimDecl::new("a"), DimDecl::new("b"), DimDecl::new("c")]);
        let data = read_csv(text.as_bytes(), &schema).unwrap();
        let p = build_problem(&data, &LossConfig::new(LossKind::Entropic)).unwrap();
        assert_eq!(p.a_full().nrows(), 48);
        assert_eq!(p.a_full().row(47).len(), 60);
        // the grand total is implied by the two-way margins
        assert_eq!(p.a().nrows(), 36);
        // nnz stays within d * p per margin family
        assert!(p.a_full().nnz() <= 3 * 60 + 60);
    }

    #[test]
    fn logistic_bounds() {
        let (h, r) = table1();
        let data = parse_table(&h, &r, &schema2()).unwrap();
        let p = build_problem(&data, &LossConfig::logistic(0.0, 10.0)).unwrap();
        assert_eq!(p.loss_b().unwrap().upper(), &[20.0]);
        let err = build_problem(&data, &LossConfig::logistic(2.5, 10.0)).unwrap_err();
        assert!(matches!(err, TableError::Problem(_)), "{err}");
        assert!(build_problem(&data, &LossConfig::logistic(5.0, 1.0)).is_err());
        assert!(build_problem(&data, &LossConfig::new(LossKind::Logistic)).is_err());
    }

    #[test]
    fn round_trip_gives_identical_problem() {
        let (h, r) = table1();
        let data = parse_table(&h, &r, &schema2()).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let again = read_csv(buf.as_slice(), &data.schema()).unwrap();
        let cfg = LossConfig::new(LossKind::Entropic);
        let (p, q) = (build_problem(&data, &cfg).unwrap(), build_problem(&again, &cfg).unwrap());
        assert_eq!(p.a(), q.a());
        assert_eq!(p.b(), q.b());
        assert_eq!(p.y(), q.y());
        assert_eq!(p.s(), q.s());
        assert_eq!(p.observed(), q.observed());
    }
}
