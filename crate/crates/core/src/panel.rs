//! Balanced panels of `(Y_it, X_it)` observations and the fixed-effects
//! within-transformation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One CSV row: `series_id,t,x,y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub series_id: String,
    pub t: u64,
    pub x: f64,
    pub y: f64,
}

/// A balanced `n × T` panel with design points in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    series_ids: Vec<String>,
    times: Vec<u64>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

impl PanelData {
    /// Builds a panel from row-per-series matrices, checking every invariant.
    pub fn new(
        series_ids: Vec<String>,
        times: Vec<u64>,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = series_ids.len();
        if n < 2 {
            return Err(Error::TooFewSeries { n });
        }
        if x.len() != n || y.len() != n {
            return Err(Error::UnbalancedPanel(format!(
                "{n} series ids but {} x rows and {} y rows",
                x.len(),
                y.len()
            )));
        }
        let t_len = times.len();
        if t_len == 0 {
            return Err(Error::EmptyPanel);
        }
        for (i, id) in series_ids.iter().enumerate() {
            if x[i].len() != t_len || y[i].len() != t_len {
                return Err(Error::UnbalancedPanel(format!(
                    "series {id:?} has {} x / {} y values, expected {t_len}",
                    x[i].len(),
                    y[i].len()
                )));
            }
            for (k, (&xv, &yv)) in x[i].iter().zip(&y[i]).enumerate() {
                let t = times[k];
                if !xv.is_finite() || !yv.is_finite() {
                    return Err(Error::NonFiniteValue {
                        series_id: id.clone(),
                        t,
                    });
                }
                if !(0.0..=1.0).contains(&xv) {
                    return Err(Error::OutOfSupport {
                        series_id: id.clone(),
                        t,
                        x: xv,
                    });
                }
            }
        }
        Ok(Self {
            series_ids,
            times,
            x,
            y,
        })
    }

    pub fn n(&self) -> usize {
        self.series_ids.len()
    }

    /// Series length `T`.
    pub fn t_len(&self) -> usize {
        self.times.len()
    }

    pub fn series_ids(&self) -> &[String] {
        &self.series_ids
    }

    pub fn times(&self) -> &[u64] {
        &self.times
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i]
    }

    pub fn y_row(&self, i: usize) -> &[f64] {
        &self.y[i]
    }

    pub fn x(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn y(&self) -> &[Vec<f64>] {
        &self.y
    }
}

/// Validates raw long-format records into a balanced panel.
///
/// Series keep the order of their first appearance; observations inside a
/// series are ordered by `t`.
pub fn validate_panel(records: &[RawRecord]) -> Result<PanelData> {
    if records.is_empty() {
        return Err(Error::EmptyPanel);
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut ids: Vec<String> = Vec::new();
    let mut rows: Vec<BTreeMap<u64, (f64, f64)>> = Vec::new();
    for rec in records {
        if rec.t == 0 {
            return Err(Error::Format(format!(
                "series {:?}: time index must be a positive integer",
                rec.series_id
            )));
        }
        if !rec.x.is_finite() || !rec.y.is_finite() {
            return Err(Error::NonFiniteValue {
                series_id: rec.series_id.clone(),
                t: rec.t,
            });
        }
        if !(0.0..=1.0).contains(&rec.x) {
            return Err(Error::OutOfSupport {
                series_id: rec.series_id.clone(),
                t: rec.t,
                x: rec.x,
            });
        }
        let slot = *index.entry(rec.series_id.as_str()).or_insert_with(|| {
            ids.push(rec.series_id.clone());
            rows.push(BTreeMap::new());
            rows.len() - 1
        });
        if rows[slot].insert(rec.t, (rec.x, rec.y)).is_some() {
            return Err(Error::DuplicateObservation {
                series_id: rec.series_id.clone(),
                t: rec.t,
            });
        }
    }
    if ids.len() < 2 {
        return Err(Error::TooFewSeries { n: ids.len() });
    }

    let times: Vec<u64> = rows[0].keys().copied().collect();
    for (id, row) in ids.iter().zip(&rows).skip(1) {
        if row.len() != times.len() {
            return Err(Error::UnbalancedPanel(format!(
                "series {:?} has {} observations but series {id:?} has {}",
                ids[0],
                times.len(),
                row.len()
            )));
        }
        if !row.keys().copied().eq(times.iter().copied()) {
            return Err(Error::UnbalancedPanel(format!(
                "time indices of series {id:?} do not match those of series {:?}",
                ids[0]
            )));
        }
    }

    let x = rows.iter().map(|r| r.values().map(|v| v.0).collect()).collect();
    let y = rows.iter().map(|r| r.values().map(|v| v.1).collect()).collect();
    PanelData::new(ids, times, x, y)
}

/// Output of the within-transformation: `Ŷ*_it` together with the means that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedPanel {
    series_ids: Vec<String>,
    ystar: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    row_means: Vec<f64>,
    cross_means: Vec<Vec<f64>>,
    grand_means: Vec<f64>,
}

impl TransformedPanel {
    pub fn n(&self) -> usize {
        self.ystar.len()
    }

    pub fn t_len(&self) -> usize {
        self.ystar.first().map_or(0, Vec::len)
    }

    pub fn series_ids(&self) -> &[String] {
        &self.series_ids
    }

    pub fn ystar_row(&self, i: usize) -> &[f64] {
        &self.ystar[i]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i]
    }

    pub fn ystar(&self) -> &[Vec<f64>] {
        &self.ystar
    }

    /// `Ȳ_i`.
    pub fn row_means(&self) -> &[f64] {
        &self.row_means
    }

    /// `Ȳ_t^(i)`: time-`t` mean over the other series, one row per `i`.
    pub fn cross_means(&self) -> &[Vec<f64>] {
        &self.cross_means
    }

    /// `Ȳ̄^(i)`: grand mean over the other series.
    pub fn grand_means(&self) -> &[f64] {
        &self.grand_means
    }

    /// Builds a transformed panel directly from already-demeaned responses.
    /// The stored means are zero. Mostly useful for tests and for callers that
    /// did their own preprocessing.
    pub fn from_parts(
        series_ids: Vec<String>,
        ystar: Vec<Vec<f64>>,
        x: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = ystar.len();
        if n < 2 {
            return Err(Error::TooFewSeries { n });
        }
        let t_len = ystar[0].len();
        if series_ids.len() != n
            || x.len() != n
            || ystar.iter().chain(&x).any(|r| r.len() != t_len)
        {
            return Err(Error::UnbalancedPanel(
                "ystar and x must both be n × T".into(),
            ));
        }
        if x.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::BadLocation {
                x: *x
                    .iter()
                    .flatten()
                    .find(|v| !(0.0..=1.0).contains(*v))
                    .unwrap(),
            });
        }
        Ok(Self {
            series_ids,
            ystar,
            x,
            row_means: vec![0.0; n],
            cross_means: vec![vec![0.0; t_len]; n],
            grand_means: vec![0.0; n],
        })
    }
}

/// Removes additive series and time effects:
/// `Ŷ*_it = Y_it − Ȳ_i − Ȳ_t^(i) + Ȳ̄^(i)`, where the last two means run over
/// all series other than `i`.
pub fn within_transform(panel: &PanelData) -> Result<TransformedPanel> {
    let n = panel.n();
    if n < 2 {
        return Err(Error::TooFewSeries { n });
    }
    let t_len = panel.t_len();
    let tf = t_len as f64;
    let others = (n - 1) as f64;

    let row_sums: Vec<f64> = panel.y.iter().map(|r| r.iter().sum()).collect();
    let mut col_sums = vec![0.0; t_len];
    for row in &panel.y {
        for (c, v) in col_sums.iter_mut().zip(row) {
            *c += v;
        }
    }
    let total: f64 = row_sums.iter().sum();

    let mut ystar = Vec::with_capacity(n);
    let mut cross_means = Vec::with_capacity(n);
    let mut row_means = Vec::with_capacity(n);
    let mut grand_means = Vec::with_capacity(n);
    for (i, row) in panel.y.iter().enumerate() {
        let row_mean = row_sums[i] / tf;
        let grand = (total - row_sums[i]) / (others * tf);
        let cross: Vec<f64> = col_sums
            .iter()
            .zip(row)
            .map(|(c, v)| (c - v) / others)
            .collect();
        ystar.push(
            row.iter()
                .zip(&cross)
                .map(|(v, c)| v - row_mean - c + grand)
                .collect(),
        );
        cross_means.push(cross);
        row_means.push(row_mean);
        grand_means.push(grand);
    }

    Ok(TransformedPanel {
        series_ids: panel.series_ids.clone(),
        ystar,
        x: panel.x.clone(),
        row_means,
        cross_means,
        grand_means,
    })
}

/// Uses the responses as they are, `Ŷ*_it = Y_it`, for panels known to carry
/// no fixed effects. All stored means are zero.
pub fn untransformed(panel: &PanelData) -> Result<TransformedPanel> {
    TransformedPanel::from_parts(panel.series_ids.clone(), panel.y.clone(), panel.x.clone())
}

/// Within-transformation when `within` is set, the raw responses otherwise.
pub fn prepare(panel: &PanelData, within: bool) -> Result<TransformedPanel> {
    if within {
        within_transform(panel)
    } else {
        untransformed(panel)
    }
}
