//! Staggered-adoption diagnostics for the two-way fixed-effects estimate:
//! the pairwise double-difference decomposition over timing groups, and
//! cell-level estimand weights with their negative share.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dates::WeekIndex;
use crate::error::{Error, Result};
use crate::fe::{demean, GroupCodes};
use crate::panel::{col, MunicipalityId, Panel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonClass {
    EarlierVsLaterControl,
    LaterVsEarlierControl,
    TreatedVsNever,
}

impl ComparisonClass {
    pub fn label(&self) -> &'static str {
        match self {
            ComparisonClass::EarlierVsLaterControl => "earlier_vs_later_control",
            ComparisonClass::LaterVsEarlierControl => "later_vs_earlier_control",
            ComparisonClass::TreatedVsNever => "treated_vs_never",
        }
    }
}

/// One pairwise 2x2 double-difference comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaconItem {
    pub class: ComparisonClass,
    /// Adoption week of the treated group in this comparison.
    pub treated_adoption: WeekIndex,
    /// Adoption week of the control group (None for never-treated).
    pub control_adoption: Option<WeekIndex>,
    pub weight: f64,
    pub dd_estimate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub class: ComparisonClass,
    pub weight: f64,
    pub average_dd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaconDecomposition {
    pub items: Vec<BaconItem>,
    pub by_class: Vec<ClassAggregate>,
    /// Weighted sum of all pair estimates; equals the two-way FE coefficient
    /// on balanced panels without covariates.
    pub recomposed_coefficient: f64,
}

struct TimingGroup {
    /// Position of the adoption week within the sorted week list; T for the
    /// never-treated group.
    adoption_pos: usize,
    adoption_week: Option<WeekIndex>,
    municipalities: Vec<MunicipalityId>,
    /// Total analytic weight of the group's cells.
    weight: f64,
}

/// Decompose the two-way FE coefficient on a binary absorbing treatment into
/// weighted pairwise 2x2 comparisons between timing groups.
///
/// Pair weights are proportional to group weight shares and the
/// treatment-share variance of each comparison: for groups with adoption
/// shares `D_k` (fraction of periods treated) and weight shares `n_k`,
/// treated-vs-never pairs carry `n_k n_U D_k (1 - D_k)`, earlier-vs-later
/// pairs `n_k n_l (D_k - D_l)(1 - D_k)`, and later-vs-earlier pairs
/// `n_k n_l D_l (D_k - D_l)`, normalized to sum to one.
///
/// `covariates` must be empty: residualize or drop them before decomposing.
pub fn bacon_decompose(
    panel: &Panel,
    treatment: &str,
    weights: Option<&str>,
    covariates: &[String],
) -> Result<BaconDecomposition> {
    if !covariates.is_empty() {
        return Err(Error::config(
            "decomposition is defined without covariates; residualize or drop them first",
        ));
    }
    let weeks = panel.weeks();
    let t_count = weeks.len();
    let munis = panel.municipalities();
    if panel.n_rows() != munis.len() * t_count {
        return Err(Error::data("decomposition requires a balanced panel"));
    }
    let week_pos: BTreeMap<WeekIndex, usize> =
        weeks.iter().enumerate().map(|(i, &w)| (w, i)).collect();

    let d = panel.column(treatment)?;
    let w: Vec<f64> = match weights {
        Some(name) => panel.column(name)?.to_vec(),
        None => vec![1.0; panel.n_rows()],
    };
    let y_col = outcome_column(panel)?;
    let y = panel.column(&y_col)?;

    // adoption position per municipality; treatment must be binary absorbing
    let mut adoption: BTreeMap<MunicipalityId, usize> = BTreeMap::new();
    let mut group_weight: BTreeMap<usize, f64> = BTreeMap::new();
    for (m, rows) in panel.municipality_blocks() {
        let mut first: Option<usize> = None;
        let mut prev = 0.0;
        let mut total_w = 0.0;
        for i in rows.clone() {
            let v = d[i];
            if v != 0.0 && v != 1.0 {
                return Err(Error::data(format!("treatment {treatment} is not binary")));
            }
            if v == 1.0 && first.is_none() {
                first = Some(week_pos[&panel.week_indices()[i]]);
            }
            if v == 0.0 && prev == 1.0 {
                return Err(Error::data(format!(
                    "treatment {treatment} is not absorbing for municipality {m}"
                )));
            }
            prev = v;
            total_w += w[i];
        }
        let pos = first.unwrap_or(t_count); // T = never treated
        adoption.insert(m, pos);
        *group_weight.entry(pos).or_insert(0.0) += total_w;
    }

    let total_weight: f64 = group_weight.values().sum();
    if total_weight <= 0.0 {
        return Err(Error::data("analytic weights sum to zero"));
    }
    let groups: Vec<TimingGroup> = group_weight
        .iter()
        .map(|(&pos, &gw)| TimingGroup {
            adoption_pos: pos,
            adoption_week: (pos < t_count).then(|| weeks[pos]),
            municipalities: adoption
                .iter()
                .filter_map(|(&m, &p)| (p == pos).then_some(m))
                .collect(),
            weight: gw / total_weight,
        })
        .collect();
    let treated_groups: Vec<&TimingGroup> =
        groups.iter().filter(|g| g.adoption_pos < t_count).collect();
    if treated_groups.is_empty() {
        return Err(Error::data("no municipality is ever treated"));
    }
    if treated_groups.len() == groups.len() && treated_groups.len() == 1 {
        return Err(Error::data(
            "a single timing group with no never-treated units has no comparisons",
        ));
    }

    // weighted mean outcome of a group over a window of week positions
    let blocks: BTreeMap<MunicipalityId, std::ops::Range<usize>> =
        panel.municipality_blocks().into_iter().collect();
    let group_mean = |g: &TimingGroup, lo: usize, hi: usize| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for &m in &g.municipalities {
            for i in blocks[&m].clone() {
                let p = week_pos[&panel.week_indices()[i]];
                if p >= lo && p < hi {
                    num += w[i] * y[i];
                    den += w[i];
                }
            }
        }
        num / den
    };

    let share = |pos: usize| (t_count - pos) as f64 / t_count as f64;
    let never = groups.iter().find(|g| g.adoption_pos == t_count);

    let mut items: Vec<BaconItem> = Vec::new();
    for (a, &k) in treated_groups.iter().enumerate() {
        let dk = share(k.adoption_pos);
        if let Some(u) = never {
            // treated vs never over the full window, split at adoption
            let dd = (group_mean(k, k.adoption_pos, t_count) - group_mean(k, 0, k.adoption_pos))
                - (group_mean(u, k.adoption_pos, t_count) - group_mean(u, 0, k.adoption_pos));
            items.push(BaconItem {
                class: ComparisonClass::TreatedVsNever,
                treated_adoption: k.adoption_week.unwrap(),
                control_adoption: None,
                weight: k.weight * u.weight * dk * (1.0 - dk),
                dd_estimate: dd,
            });
        }
        for &l in treated_groups.iter().skip(a + 1) {
            // groups are in adoption order: k earlier, l later
            let dl = share(l.adoption_pos);
            let (pk, pl) = (k.adoption_pos, l.adoption_pos);

            // earlier treated vs later-as-control, window before l adopts
            let dd_k = (group_mean(k, pk, pl) - group_mean(k, 0, pk))
                - (group_mean(l, pk, pl) - group_mean(l, 0, pk));
            items.push(BaconItem {
                class: ComparisonClass::EarlierVsLaterControl,
                treated_adoption: k.adoption_week.unwrap(),
                control_adoption: Some(l.adoption_week.unwrap()),
                weight: k.weight * l.weight * (dk - dl) * (1.0 - dk),
                dd_estimate: dd_k,
            });

            // later treated vs earlier-as-control, window after k adopts
            let dd_l = (group_mean(l, pl, t_count) - group_mean(l, pk, pl))
                - (group_mean(k, pl, t_count) - group_mean(k, pk, pl));
            items.push(BaconItem {
                class: ComparisonClass::LaterVsEarlierControl,
                treated_adoption: l.adoption_week.unwrap(),
                control_adoption: Some(k.adoption_week.unwrap()),
                weight: k.weight * l.weight * dl * (dk - dl),
                dd_estimate: dd_l,
            });
        }
    }

    let total: f64 = items.iter().map(|i| i.weight).sum();
    if total <= 0.0 {
        return Err(Error::numerical("decomposition has zero total weight"));
    }
    for item in &mut items {
        item.weight /= total;
    }
    let recomposed_coefficient = items.iter().map(|i| i.weight * i.dd_estimate).sum();

    let mut by_class = Vec::new();
    for class in [
        ComparisonClass::EarlierVsLaterControl,
        ComparisonClass::LaterVsEarlierControl,
        ComparisonClass::TreatedVsNever,
    ] {
        let ws: f64 = items.iter().filter(|i| i.class == class).map(|i| i.weight).sum();
        if ws > 0.0 {
            let avg = items
                .iter()
                .filter(|i| i.class == class)
                .map(|i| i.weight * i.dd_estimate)
                .sum::<f64>()
                / ws;
            by_class.push(ClassAggregate {
                class,
                weight: ws,
                average_dd: avg,
            });
        }
    }

    Ok(BaconDecomposition {
        items,
        by_class,
        recomposed_coefficient,
    })
}

fn outcome_column(panel: &Panel) -> Result<String> {
    match panel.categories.as_slice() {
        [one] => Ok(col::rate(one)),
        _ => Err(Error::config(
            "diagnostics need a single-outcome panel; select a category first",
        )),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DcdhWeights {
    /// (municipality, week, weight) for every treated cell, in panel order.
    pub cells: Vec<(MunicipalityId, WeekIndex, f64)>,
    pub sum_of_weights: f64,
    /// Share of total weight magnitude carried by negative weights.
    pub negative_share: f64,
}

/// Cell-level weights the two-way FE estimand places on treated cells: the
/// weight of cell (m, t) is proportional to its analytic weight times the
/// residual of the treatment on the absorbed fixed effects, normalized so
/// the treated-cell weights sum to one. Negative weights flag comparisons
/// that can mis-sign heterogeneous effects.
pub fn dcdh_weights(
    panel: &Panel,
    treatment: &str,
    fe_dims: &[crate::fe::FeDim],
    weights: Option<&str>,
) -> Result<DcdhWeights> {
    let d = panel.column(treatment)?;
    if d.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::data(format!("treatment {treatment} is not binary")));
    }
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::data("no treated cells"));
    }
    let w: Vec<f64> = match weights {
        Some(name) => panel.column(name)?.to_vec(),
        None => vec![1.0; panel.n_rows()],
    };

    let dims: Vec<GroupCodes> = fe_dims
        .iter()
        .map(|dim| {
            let (codes, n_levels) = dim.codes(panel);
            GroupCodes { codes, n_levels }
        })
        .collect();
    let mut cols = vec![d.to_vec()];
    demean(&mut cols, &dims, &w, 1e-10, 10_000)?;
    let resid = &cols[0];

    let mut raw: Vec<(MunicipalityId, WeekIndex, f64)> = Vec::new();
    let mut denom = 0.0;
    for i in 0..panel.n_rows() {
        if d[i] == 1.0 {
            let v = w[i] * resid[i];
            denom += v;
            raw.push((panel.municipality_ids()[i], panel.week_indices()[i], v));
        }
    }
    if denom.abs() < 1e-300 {
        return Err(Error::numerical(
            "treatment is collinear with the fixed effects; weights are undefined",
        ));
    }
    let mut neg = 0.0;
    let mut mag = 0.0;
    let cells: Vec<(MunicipalityId, WeekIndex, f64)> = raw
        .into_iter()
        .map(|(m, t, v)| {
            let weight = v / denom;
            mag += weight.abs();
            if weight < 0.0 {
                neg += weight.abs();
            }
            (m, t, weight)
        })
        .collect();
    let sum_of_weights: f64 = cells.iter().map(|c| c.2).sum();

    Ok(DcdhWeights {
        cells,
        sum_of_weights,
        negative_share: if mag > 0.0 { neg / mag } else { 0.0 },
    })
}
