//! Panel route-choice data: loading, screening, initialisation split,
//! covariate discretisation and choice-history covariates.
//!
//! A panel file is delimiter-separated text with a header row. Each row is
//! one trip of one rider; the mandatory columns are the rider identifier,
//! the occasion index and the chosen route (`1` or `2`). Every other
//! declared column is a real-valued experienced attribute of the chosen
//! route.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the two competing routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Route {
    One,
    Two,
}

impl Route {
    pub const BOTH: [Route; 2] = [Route::One, Route::Two];

    pub fn from_label(label: u8) -> Option<Route> {
        match label {
            1 => Some(Route::One),
            2 => Some(Route::Two),
            _ => None,
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Route::One => 1,
            Route::Two => 2,
        }
    }

    /// Zero-based index, for per-route arrays.
    pub fn index(self) -> usize {
        self.label() as usize - 1
    }

    pub fn other(self) -> Route {
        match self {
            Route::One => Route::Two,
            Route::Two => Route::One,
        }
    }
}

impl TryFrom<u8> for Route {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        Route::from_label(v).ok_or_else(|| format!("route label {v} is not 1 or 2"))
    }
}

impl From<Route> for u8 {
    fn from(r: Route) -> u8 {
        r.label()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    /// Contiguous 1-based position in the rider's sequence.
    pub occasion: u32,
    pub chosen_route: Route,
    /// Experienced attributes of the chosen route, aligned with
    /// [`PanelDataset::attribute_names`].
    pub attributes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiderRecord {
    pub rider_id: String,
    /// The rider's most-travelled OD pair; `trips` holds only trips on it.
    pub od_pair: String,
    /// Trips made on other OD pairs in the direction of `od_pair`.
    pub other_od_trips: u32,
    pub trips: Vec<TripRecord>,
}

impl RiderRecord {
    pub fn choices(&self) -> Vec<Route> {
        self.trips.iter().map(|t| t.chosen_route).collect()
    }

    pub fn len(&self) -> usize {
        self.trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trips.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PanelDataset {
    pub attribute_names: Vec<String>,
    pub riders: Vec<RiderRecord>,
}

impl PanelDataset {
    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attribute_names.iter().position(|n| n == name)
    }

    pub fn n_trips(&self) -> usize {
        self.riders.iter().map(|r| r.trips.len()).sum()
    }
}

/// Column mapping for a panel file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelSchema {
    pub rider_id: String,
    pub occasion: String,
    pub chosen_route: String,
    pub od_pair: Option<String>,
    pub direction: Option<String>,
    /// Attribute columns to keep; empty means every unmapped column.
    pub attributes: Vec<String>,
    pub delimiter: char,
    /// Columns whose domain is checked when present.
    pub travel_time: String,
    pub crowding_density: String,
    pub standing_prob: String,
}

impl Default for PanelSchema {
    fn default() -> Self {
        PanelSchema {
            rider_id: "rider_id".into(),
            occasion: "occasion".into(),
            chosen_route: "chosen_route".into(),
            od_pair: None,
            direction: None,
            attributes: Vec::new(),
            delimiter: ',',
            travel_time: "travel_time".into(),
            crowding_density: "crowding_density".into(),
            standing_prob: "standing_prob".into(),
        }
    }
}

pub fn load_panel(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<PanelDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(file, schema)
}

struct RawRow {
    rider: String,
    occasion: i64,
    route: Route,
    od: String,
    direction: String,
    attributes: Vec<f64>,
}

pub fn read_panel<R: Read>(reader: R, schema: &PanelSchema) -> Result<PanelDataset> {
    if !schema.delimiter.is_ascii() {
        return Err(Error::Schema(format!(
            "delimiter {:?} is not ASCII",
            schema.delimiter
        )));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing mandatory column `{name}`")))
    };
    let rider_col = column(&schema.rider_id)?;
    let occ_col = column(&schema.occasion)?;
    let route_col = column(&schema.chosen_route)?;
    let od_col = schema.od_pair.as_deref().map(column).transpose()?;
    let dir_col = schema.direction.as_deref().map(column).transpose()?;

    let mapped: HashSet<usize> = [Some(rider_col), Some(occ_col), Some(route_col), od_col, dir_col]
        .into_iter()
        .flatten()
        .collect();
    let attr_cols: Vec<(String, usize)> = if schema.attributes.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !mapped.contains(i))
            .map(|(i, h)| (h.to_string(), i))
            .collect()
    } else {
        schema
            .attributes
            .iter()
            .map(|a| column(a).map(|i| (a.clone(), i)))
            .collect::<Result<_>>()?
    };
    let attribute_names: Vec<String> = attr_cols.iter().map(|(n, _)| n.clone()).collect();
    let role = |name: &str| attribute_names.iter().position(|n| n == name);
    let tt_idx = role(&schema.travel_time);
    let crowd_idx = role(&schema.crowding_density);
    let sp_idx = role(&schema.standing_prob);

    let mut rows = Vec::new();
    let mut seen: HashSet<(String, i64)> = HashSet::new();
    for (k, rec) in rdr.records().enumerate() {
        // header is line 1
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let cell = |i: usize| -> Result<&str> {
            match rec.get(i) {
                Some(s) if !s.is_empty() => Ok(s),
                _ => Err(Error::Parse {
                    row,
                    message: format!("missing value in column `{}`", &headers[i]),
                }),
            }
        };
        let rider = cell(rider_col)?.to_string();
        let occasion: i64 = cell(occ_col)?.parse().map_err(|_| Error::Parse {
            row,
            message: format!("occasion `{}` is not an integer", &rec[occ_col]),
        })?;
        let route_label: i64 = cell(route_col)?.parse().map_err(|_| Error::Parse {
            row,
            message: format!("chosen route `{}` is not an integer", &rec[route_col]),
        })?;
        let route = u8::try_from(route_label)
            .ok()
            .and_then(Route::from_label)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "row {row}: chosen route {route_label} is not in {{1, 2}}"
                ))
            })?;
        let od = match od_col {
            Some(i) => cell(i)?.to_string(),
            None => String::new(),
        };
        let direction = match dir_col {
            Some(i) => cell(i)?.to_string(),
            None => String::new(),
        };
        let mut attributes = Vec::with_capacity(attr_cols.len());
        for (name, i) in &attr_cols {
            let v: f64 = cell(*i)?.parse().map_err(|_| Error::Parse {
                row,
                message: format!("attribute `{name}` value `{}` is not a number", &rec[*i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("attribute `{name}` is not finite"),
                });
            }
            attributes.push(v);
        }
        if let Some(i) = tt_idx {
            if attributes[i] <= 0.0 {
                return Err(Error::Validation(format!(
                    "row {row}: travel time must be positive"
                )));
            }
        }
        if let Some(i) = crowd_idx {
            if attributes[i] < 0.0 {
                return Err(Error::Validation(format!(
                    "row {row}: crowding density must be non-negative"
                )));
            }
        }
        if let Some(i) = sp_idx {
            if !(0.0..=1.0).contains(&attributes[i]) {
                return Err(Error::Validation(format!(
                    "row {row}: standing probability must lie in [0, 1]"
                )));
            }
        }
        if !seen.insert((rider.clone(), occasion)) {
            return Err(Error::Validation(format!(
                "duplicate (rider, occasion) pair ({rider}, {occasion}) at row {row}"
            )));
        }
        rows.push(RawRow {
            rider,
            occasion,
            route,
            od,
            direction,
            attributes,
        });
    }

    // group rows by rider, keeping first-appearance order of riders
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawRow>> = HashMap::new();
    for r in rows {
        if !groups.contains_key(&r.rider) {
            order.push(r.rider.clone());
        }
        groups.entry(r.rider.clone()).or_default().push(r);
    }

    let riders = order
        .into_iter()
        .map(|id| {
            let mut rows = groups.remove(&id).unwrap_or_default();
            rows.sort_by_key(|r| r.occasion);
            assemble_rider(id, rows)
        })
        .collect();
    Ok(PanelDataset {
        attribute_names,
        riders,
    })
}

fn assemble_rider(rider_id: String, rows: Vec<RawRow>) -> RiderRecord {
    let mut od_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &rows {
        *od_counts.entry(r.od.as_str()).or_default() += 1;
    }
    // most-travelled OD pair; ties go to the lexicographically smallest label
    let main_od = od_counts
        .iter()
        .fold(None::<(&str, usize)>, |best, (od, n)| match best {
            Some((_, m)) if m >= *n => best,
            _ => Some((od, *n)),
        })
        .map(|(od, _)| od.to_string())
        .unwrap_or_default();
    let main_direction = rows
        .iter()
        .find(|r| r.od == main_od)
        .map(|r| r.direction.clone())
        .unwrap_or_default();
    let other_od_trips = rows
        .iter()
        .filter(|r| r.od != main_od && r.direction == main_direction)
        .count() as u32;
    let trips = rows
        .into_iter()
        .filter(|r| r.od == main_od)
        .enumerate()
        .map(|(k, r)| TripRecord {
            occasion: k as u32 + 1,
            chosen_route: r.route,
            attributes: r.attributes,
        })
        .collect();
    RiderRecord {
        rider_id,
        od_pair: main_od,
        other_od_trips,
        trips,
    }
}

/// Writes a panel in the layout [`read_panel`] accepts with the default schema.
pub fn write_panel<W: Write>(data: &PanelDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Validation(format!("panel write failed: {e}"));
    let mut header = vec!["rider_id".to_string(), "occasion".into(), "chosen_route".into()];
    header.extend(data.attribute_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for rider in &data.riders {
        for trip in &rider.trips {
            let mut rec = vec![
                rider.rider_id.clone(),
                trip.occasion.to_string(),
                trip.chosen_route.label().to_string(),
            ];
            rec.extend(trip.attributes.iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()
        .map_err(|e| Error::Validation(format!("panel write failed: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Screening

/// Rules applied by [`screen_riders`].
///
/// `max_other_od_trips` counts trips (not distinct OD pairs) made on other
/// OD pairs in the direction of the rider's most-travelled pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningConfig {
    pub min_choices: usize,
    pub max_other_od_trips: u32,
    /// Step 3: drop riders who never really alternate between routes.
    pub drop_low_switching: bool,
    pub min_model_occasions: usize,
    /// Fixed initialisation length; `None` uses the earliest valid split.
    pub init_occasions: Option<usize>,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        ScreeningConfig {
            min_choices: 5,
            max_other_od_trips: 2,
            drop_low_switching: true,
            min_model_occasions: 2,
            init_occasions: None,
        }
    }
}

impl ScreeningConfig {
    pub fn init_rule(&self) -> InitRule {
        match self.init_occasions {
            Some(n) => InitRule::Fixed(n),
            None => InitRule::Earliest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitRule {
    /// Smallest T_I with both routes seen and a prior experience of the
    /// route chosen at T_I.
    Earliest,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub name: String,
    pub survivors: usize,
    pub removed: usize,
    pub reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Summary {
            count: v.len(),
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningStatus {
    Ok,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub status: ScreeningStatus,
    pub input_riders: usize,
    pub steps: Vec<StepReport>,
    /// Total occasions (T_I + T) of the survivors.
    pub total_occasions: Option<Summary>,
    /// Modelling occasions (T) of the survivors.
    pub available_occasions: Option<Summary>,
    /// Total occasions of riders removed at step 3.
    pub low_switching_occasions: Option<Summary>,
}

/// Step-3 classification of a choice sequence; `None` keeps the rider.
///
/// The least-chosen route is the one with fewer choices; on a tie it is the
/// route not chosen first.
pub fn low_switching_reason(choices: &[Route]) -> Option<&'static str> {
    let n1 = choices.iter().filter(|r| **r == Route::One).count();
    let n2 = choices.len() - n1;
    if n1 == 0 || n2 == 0 {
        return Some("single_route");
    }
    let least = match n1.cmp(&n2) {
        std::cmp::Ordering::Less => Route::One,
        std::cmp::Ordering::Greater => Route::Two,
        std::cmp::Ordering::Equal => choices[0].other(),
    };
    if n1.min(n2) <= 1 {
        return Some("least_route_chosen_once");
    }
    let switches_in = choices
        .windows(2)
        .filter(|w| w[0] != w[1] && w[1] == least)
        .count();
    if switches_in == 1 {
        return Some("single_switch_to_least_route");
    }
    None
}

pub fn screen_riders(
    data: &PanelDataset,
    rules: &ScreeningConfig,
) -> (PanelDataset, ScreeningReport) {
    let input_riders = data.riders.len();
    let mut current: Vec<&RiderRecord> = data.riders.iter().collect();
    let mut steps = Vec::with_capacity(4);
    let mut low_switching_occ = Vec::new();

    let mut apply = |step: usize,
                     name: &str,
                     current: &mut Vec<&RiderRecord>,
                     rule: &mut dyn FnMut(&RiderRecord) -> Option<String>| {
        let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
        let before = current.len();
        current.retain(|r| match rule(r) {
            Some(reason) => {
                *reasons.entry(reason).or_default() += 1;
                false
            }
            None => true,
        });
        steps.push(StepReport {
            step,
            name: name.to_string(),
            survivors: current.len(),
            removed: before - current.len(),
            reasons,
        });
    };

    apply(1, "minimum_choices", &mut current, &mut |r| {
        (r.len() < rules.min_choices).then(|| "too_few_choices".to_string())
    });
    apply(2, "od_contamination", &mut current, &mut |r| {
        (r.other_od_trips > rules.max_other_od_trips).then(|| "other_od_trips".to_string())
    });
    apply(3, "low_switching", &mut current, &mut |r| {
        if !rules.drop_low_switching {
            return None;
        }
        let reason = low_switching_reason(&r.choices())?;
        low_switching_occ.push(r.len() as f64);
        Some(reason.to_string())
    });
    let init_rule = rules.init_rule();
    apply(4, "model_occasions", &mut current, &mut |r| {
        match split_with_rule(&r.choices(), init_rule) {
            Some((_, t)) if t >= rules.min_model_occasions => None,
            Some(_) => Some("too_few_model_occasions".to_string()),
            None => Some("no_valid_initialisation".to_string()),
        }
    });

    let total: Vec<f64> = current.iter().map(|r| r.len() as f64).collect();
    let available: Vec<f64> = current
        .iter()
        .filter_map(|r| split_with_rule(&r.choices(), init_rule).map(|(_, t)| t as f64))
        .collect();
    let survivors = PanelDataset {
        attribute_names: data.attribute_names.clone(),
        riders: current.into_iter().cloned().collect(),
    };
    let report = ScreeningReport {
        status: if survivors.riders.is_empty() {
            ScreeningStatus::Empty
        } else {
            ScreeningStatus::Ok
        },
        input_riders,
        steps,
        total_occasions: Summary::of(&total),
        available_occasions: Summary::of(&available),
        low_switching_occasions: Summary::of(&low_switching_occ),
    };
    (survivors, report)
}

// ---------------------------------------------------------------------------
// Initialisation split

/// Whether `t_init` is a valid initialisation length for `choices`: both
/// routes appear in `1..=t_init` and the route chosen at `t_init` was
/// already chosen earlier.
pub fn valid_init_length(choices: &[Route], t_init: usize) -> bool {
    if t_init < 2 || t_init > choices.len() {
        return false;
    }
    let head = &choices[..t_init];
    let both = head.contains(&Route::One) && head.contains(&Route::Two);
    let last = head[t_init - 1];
    both && head[..t_init - 1].contains(&last)
}

fn split_with_rule(choices: &[Route], rule: InitRule) -> Option<(usize, usize)> {
    let t_init = match rule {
        InitRule::Earliest => (2..=choices.len()).find(|&t| valid_init_length(choices, t))?,
        InitRule::Fixed(t) => valid_init_length(choices, t).then_some(t)?,
    };
    Some((t_init, choices.len() - t_init))
}

/// Earliest initialisation split `(T_I, T)`.
///
/// Fails when no valid split leaves at least two modelling occasions.
pub fn split_initialisation(rider: &RiderRecord) -> Result<(usize, usize)> {
    split_initialisation_with(rider, InitRule::Earliest, 2)
}

pub fn split_initialisation_with(
    rider: &RiderRecord,
    rule: InitRule,
    min_model_occasions: usize,
) -> Result<(usize, usize)> {
    match split_with_rule(&rider.choices(), rule) {
        Some((ti, t)) if t >= min_model_occasions => Ok((ti, t)),
        Some((ti, t)) => Err(Error::Validation(format!(
            "rider {}: split T_I = {ti} leaves T = {t} < {min_model_occasions}",
            rider.rider_id
        ))),
        None => Err(Error::Validation(format!(
            "rider {}: no valid initialisation split",
            rider.rider_id
        ))),
    }
}

// ---------------------------------------------------------------------------
// Discretisation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationConfig {
    pub travel_time: String,
    pub crowding_density: String,
    pub standing_prob: String,
    /// Lower bounds of the crowding1 and crowding2 bands (riders per m²).
    pub crowding_thresholds: [f64; 2],
    /// Lower bounds of the SP1 and SP2 bands.
    pub standing_thresholds: [f64; 2],
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        DiscretizationConfig {
            travel_time: "travel_time".into(),
            crowding_density: "crowding_density".into(),
            standing_prob: "standing_prob".into(),
            crowding_thresholds: [1.0, 2.0],
            standing_thresholds: [0.4, 0.7],
        }
    }
}

/// Columns appended by [`discretize_covariates`], in order.
pub const DISCRETIZED_COLUMNS: [&str; 8] = [
    "crowding1",
    "crowding2",
    "sp1",
    "sp2",
    "tt_c1_sp1",
    "tt_c1_sp2",
    "tt_c2_sp1",
    "tt_c2_sp2",
];

/// Band index in `{0, 1, 2}`: left-closed, right-open, top band unbounded.
fn band(value: f64, thresholds: [f64; 2]) -> usize {
    if value >= thresholds[1] {
        2
    } else if value >= thresholds[0] {
        1
    } else {
        0
    }
}

pub fn discretize_covariates(
    data: &PanelDataset,
    thresholds: &DiscretizationConfig,
) -> Result<PanelDataset> {
    for (name, th) in [
        ("crowding_thresholds", thresholds.crowding_thresholds),
        ("standing_thresholds", thresholds.standing_thresholds),
    ] {
        if !(th[0].is_finite() && th[1].is_finite() && th[0] < th[1]) {
            return Err(Error::Config(format!(
                "{name} must be strictly increasing, got {th:?}"
            )));
        }
    }
    let col = |name: &str| {
        data.attribute_index(name)
            .ok_or_else(|| Error::Schema(format!("discretisation needs column `{name}`")))
    };
    let tt = col(&thresholds.travel_time)?;
    let cd = col(&thresholds.crowding_density)?;
    let sp = col(&thresholds.standing_prob)?;
    for c in DISCRETIZED_COLUMNS {
        if data.attribute_index(c).is_some() {
            return Err(Error::Schema(format!("column `{c}` already present")));
        }
    }

    let mut out = data.clone();
    out.attribute_names
        .extend(DISCRETIZED_COLUMNS.iter().map(|s| s.to_string()));
    for rider in &mut out.riders {
        for trip in &mut rider.trips {
            let c = band(trip.attributes[cd], thresholds.crowding_thresholds);
            let s = band(trip.attributes[sp], thresholds.standing_thresholds);
            let time = trip.attributes[tt];
            let ind = |b: bool| if b { 1.0 } else { 0.0 };
            trip.attributes.extend([
                ind(c == 1),
                ind(c == 2),
                ind(s == 1),
                ind(s == 2),
                time * ind(c == 1 && s == 1),
                time * ind(c == 1 && s == 2),
                time * ind(c == 2 && s == 1),
                time * ind(c == 2 && s == 2),
            ]);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Choice-history covariates

/// Covariates derived from the choice sequence at one occasion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryCovariates {
    /// Switches among occasions `2..=t`, divided by `t`.
    pub prop_last_transitions: f64,
    /// Switches over the whole sequence, divided by its length.
    pub prop_total_transitions: f64,
    /// Choices of the modal route over the whole sequence, divided by its length.
    pub highest_choice_prop: f64,
    /// Choices of each route among `1..=t`, divided by `t`.
    pub choice_prop: [f64; 2],
    /// `1` if the choice at `t - 1` was route 1; `0` at `t = 1`.
    pub lagged_route1: f64,
}

impl HistoryCovariates {
    pub const NAMES: [&'static str; 7] = [
        "const",
        "prop_last_transitions",
        "prop_total_transitions",
        "highest_choice_prop",
        "choice_prop_route1",
        "choice_prop_route2",
        "lagged_route1",
    ];

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "const" => 1.0,
            "prop_last_transitions" => self.prop_last_transitions,
            "prop_total_transitions" => self.prop_total_transitions,
            "highest_choice_prop" => self.highest_choice_prop,
            "choice_prop_route1" => self.choice_prop[0],
            "choice_prop_route2" => self.choice_prop[1],
            "lagged_route1" => self.lagged_route1,
            _ => return None,
        })
    }
}

pub fn history_covariates(rider: &RiderRecord, t: usize) -> Result<HistoryCovariates> {
    history_from_choices(&rider.choices(), t)
}

pub fn history_from_choices(choices: &[Route], t: usize) -> Result<HistoryCovariates> {
    let n = choices.len();
    if t == 0 || t > n {
        return Err(Error::Domain(format!(
            "occasion {t} outside 1..={n}"
        )));
    }
    let switches = |seq: &[Route]| seq.windows(2).filter(|w| w[0] != w[1]).count() as f64;
    let n1_all = choices.iter().filter(|r| **r == Route::One).count();
    let n1_t = choices[..t].iter().filter(|r| **r == Route::One).count();
    Ok(HistoryCovariates {
        prop_last_transitions: switches(&choices[..t]) / t as f64,
        prop_total_transitions: switches(choices) / n as f64,
        highest_choice_prop: n1_all.max(n - n1_all) as f64 / n as f64,
        choice_prop: [n1_t as f64 / t as f64, (t - n1_t) as f64 / t as f64],
        lagged_route1: if t >= 2 && choices[t - 2] == Route::One {
            1.0
        } else {
            0.0
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Route::{One as A, Two as B};

    fn seq(labels: &[u8]) -> Vec<Route> {
        labels.iter().map(|&l| Route::from_label(l).unwrap()).collect()
    }

    fn rider(id: &str, labels: &[u8]) -> RiderRecord {
        RiderRecord {
            rider_id: id.into(),
            od_pair: String::new(),
            other_od_trips: 0,
            trips: seq(labels)
                .into_iter()
                .enumerate()
                .map(|(k, r)| TripRecord {
                    occasion: k as u32 + 1,
                    chosen_route: r,
                    attributes: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn loads_and_orders_trips() {
        let csv = "rider_id,occasion,chosen_route,travel_time\n\
                   a,3,1,0.3\nb,1,2,0.5\na,1,2,0.2\na,2,1,0.4\nb,2,2,0.6\nb,3,1,0.1\n";
        let d = read_panel(csv.as_bytes(), &PanelSchema::default()).unwrap();
        assert_eq!(d.riders.len(), 2);
        assert_eq!(d.attribute_names, vec!["travel_time"]);
        let a = &d.riders[0];
        assert_eq!(a.rider_id, "a");
        assert_eq!(a.choices(), vec![B, A, A]);
        assert_eq!(a.trips[0].attributes, vec![0.2]);
        assert_eq!(
            a.trips.iter().map(|t| t.occasion).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn rejects_duplicate_pair() {
        let csv = "rider_id,occasion,chosen_route\na,1,1\na,1,2\n";
        let err = read_panel(csv.as_bytes(), &PanelSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("(a, 1)")), "{err}");
    }

    #[test]
    fn rejects_route_three() {
        let csv = "rider_id,occasion,chosen_route\na,1,3\n";
        let err = read_panel(csv.as_bytes(), &PanelSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn missing_column_and_cells() {
        let csv = "rider_id,chosen_route\na,1\n";
        assert!(matches!(
            read_panel(csv.as_bytes(), &PanelSchema::default()),
            Err(Error::Schema(_))
        ));
        let csv = "rider_id,occasion,chosen_route,travel_time\na,1,1,\n";
        assert!(matches!(
            read_panel(csv.as_bytes(), &PanelSchema::default()),
            Err(Error::Parse { row: 2, .. })
        ));
        let csv = "rider_id,occasion,chosen_route\na,x,1\n";
        assert!(matches!(
            read_panel(csv.as_bytes(), &PanelSchema::default()),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn attribute_domains_checked() {
        let bad = [
            "rider_id,occasion,chosen_route,travel_time\na,1,1,0\n",
            "rider_id,occasion,chosen_route,crowding_density\na,1,1,-0.1\n",
            "rider_id,occasion,chosen_route,standing_prob\na,1,1,1.5\n",
        ];
        for csv in bad {
            assert!(matches!(
                read_panel(csv.as_bytes(), &PanelSchema::default()),
                Err(Error::Validation(_))
            ));
        }
    }

    #[test]
    fn od_pairs_split_main_and_other() {
        let csv = "rider_id,occasion,chosen_route,od,dir\n\
                   a,1,1,X,N\na,2,2,X,N\na,3,1,Y,N\na,4,1,X,N\na,5,2,Z,S\na,6,1,Y,N\n";
        let schema = PanelSchema {
            od_pair: Some("od".into()),
            direction: Some("dir".into()),
            ..PanelSchema::default()
        };
        let d = read_panel(csv.as_bytes(), &schema).unwrap();
        let a = &d.riders[0];
        assert_eq!(a.od_pair, "X");
        assert_eq!(a.other_od_trips, 2);
        assert_eq!(a.choices(), vec![A, B, A]);
    }

    #[test]
    fn write_then_read_round_trip() {
        let csv = "rider_id,occasion,chosen_route,travel_time\na,1,2,0.25\na,2,1,0.5\n";
        let d = read_panel(csv.as_bytes(), &PanelSchema::default()).unwrap();
        let mut buf = Vec::new();
        write_panel(&d, &mut buf).unwrap();
        let back = read_panel(buf.as_slice(), &PanelSchema::default()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn split_examples() {
        let r = rider("p", &[1, 1, 2, 1, 1, 2, 1, 1, 2, 1]);
        assert_eq!(split_initialisation(&r).unwrap(), (4, 6));
        // T_I = 3 leaves T = 1
        let r = rider("q", &[1, 2, 1, 2]);
        assert_eq!(split_with_rule(&r.choices(), InitRule::Earliest), Some((3, 1)));
        assert!(split_initialisation(&r).is_err());
        let r = rider("r", &[2, 2, 2, 1]);
        assert_eq!(split_with_rule(&r.choices(), InitRule::Earliest), None);
        assert!(split_initialisation(&r).is_err());
    }

    #[test]
    fn fixed_split_requires_valid_prefix() {
        let r = rider("p", &[1, 2, 2, 1, 1, 1]);
        assert_eq!(
            split_initialisation_with(&r, InitRule::Fixed(3), 2).unwrap(),
            (3, 3)
        );
        assert!(split_initialisation_with(&r, InitRule::Fixed(2), 2).is_err());
        assert!(split_initialisation_with(&r, InitRule::Fixed(5), 2).is_err());
    }

    #[test]
    fn low_switching_rules() {
        assert_eq!(low_switching_reason(&seq(&[1, 1, 1, 1, 1, 1])), Some("single_route"));
        assert_eq!(
            low_switching_reason(&seq(&[1, 1, 2, 1, 1, 1])),
            Some("least_route_chosen_once")
        );
        assert_eq!(
            low_switching_reason(&seq(&[1, 1, 1, 2, 2, 1, 1])),
            Some("single_switch_to_least_route")
        );
        assert_eq!(low_switching_reason(&seq(&[1, 2, 1, 2, 1, 1])), None);
        // tie: least route is the one not chosen first (route 2), entered once
        assert_eq!(
            low_switching_reason(&seq(&[1, 1, 2, 2])),
            Some("single_switch_to_least_route")
        );
    }

    #[test]
    fn step_one_removes_short_rider() {
        let data = PanelDataset {
            attribute_names: vec![],
            riders: vec![rider("short", &[1, 2, 1, 2]), rider("ok", &[1, 2, 1, 2, 1, 1, 2, 1])],
        };
        let (out, report) = screen_riders(&data, &ScreeningConfig::default());
        assert_eq!(report.steps[0].removed, 1);
        assert_eq!(out.riders.len(), 1);
        assert_eq!(out.riders[0].rider_id, "ok");
    }

    #[test]
    fn empty_survivors_reported() {
        let data = PanelDataset {
            attribute_names: vec![],
            riders: vec![rider("one", &[1, 1, 1, 1, 1, 1])],
        };
        let (out, report) = screen_riders(&data, &ScreeningConfig::default());
        assert!(out.riders.is_empty());
        assert_eq!(report.status, ScreeningStatus::Empty);
        assert_eq!(report.steps[2].reasons["single_route"], 1);
        assert!(report.total_occasions.is_none());
    }

    #[test]
    fn discretize_bands() {
        let data = PanelDataset {
            attribute_names: vec!["travel_time".into(), "crowding_density".into(), "standing_prob".into()],
            riders: vec![RiderRecord {
                rider_id: "a".into(),
                od_pair: String::new(),
                other_od_trips: 0,
                trips: [[0.3, 0.5, 0.2], [0.3, 1.5, 0.8], [0.4, 2.0, 0.4], [0.2, 1.0, 0.7]]
                    .iter()
                    .enumerate()
                    .map(|(k, a)| TripRecord {
                        occasion: k as u32 + 1,
                        chosen_route: A,
                        attributes: a.to_vec(),
                    })
                    .collect(),
            }],
        };
        let out = discretize_covariates(&data, &DiscretizationConfig::default()).unwrap();
        let row = |k: usize| out.riders[0].trips[k].attributes[3..].to_vec();
        assert_eq!(row(0), vec![0.0; 8]);
        assert_eq!(row(1), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.3, 0.0, 0.0]);
        assert_eq!(row(2), vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.4, 0.0]);
        assert_eq!(row(3), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.2, 0.0, 0.0]);

        let bad = DiscretizationConfig {
            crowding_thresholds: [2.0, 1.0],
            ..DiscretizationConfig::default()
        };
        assert!(matches!(discretize_covariates(&data, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn history_examples() {
        let h = history_from_choices(&seq(&[1, 1, 2, 1]), 4).unwrap();
        assert_eq!(h.prop_last_transitions, 0.5);
        let h = history_from_choices(&seq(&[1, 1, 1, 1]), 4).unwrap();
        assert_eq!(h.prop_last_transitions, 0.0);
        assert_eq!(h.prop_total_transitions, 0.0);
        assert_eq!(h.highest_choice_prop, 1.0);
        let h = history_from_choices(&seq(&[1, 2, 1, 2]), 4).unwrap();
        assert_eq!(h.prop_total_transitions, 0.75);
        let h = history_from_choices(&seq(&[1, 2, 1, 2]), 1).unwrap();
        assert_eq!(h.prop_last_transitions, 0.0);
        assert_eq!(h.lagged_route1, 0.0);
        assert_eq!(h.choice_prop, [1.0, 0.0]);
        assert!(history_from_choices(&seq(&[1, 2]), 3).is_err());
        assert!(history_from_choices(&seq(&[1, 2]), 0).is_err());
    }
}
