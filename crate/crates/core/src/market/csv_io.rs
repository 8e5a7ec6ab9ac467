use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{MarketFrame, OHLC};
use crate::error::{Error, Result};

/// How calendars of different assets are reconciled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignPolicy {
    /// Keep only dates on which every asset has a row.
    #[default]
    Intersection,
    /// Use the union of dates; a missing row repeats the asset's previous
    /// close for open/high/low/close and previous values for any extra
    /// features. Leading dates before an asset's first row are dropped.
    ForwardFill,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub align: AlignPolicy,
    /// Features that must be present in the header, in addition to
    /// `date` and `asset`.
    pub required_features: Vec<String>,
    /// Minimum number of aligned days (look-back plus longest interval).
    pub min_days: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            align: AlignPolicy::Intersection,
            required_features: OHLC.iter().map(|s| s.to_string()).collect(),
            min_days: 2,
        }
    }
}

type AssetRows = BTreeMap<NaiveDate, Vec<f64>>;

/// Read a long-format `date,asset,open,high,low,close[,extra...]` file.
pub fn load_csv(path: &Path, options: &LoadOptions) -> Result<MarketFrame> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(parse_err(1, "empty file".into()));
    }
    if headers.len() < 3 || &headers[0] != "date" || &headers[1] != "asset" {
        return Err(parse_err(
            1,
            format!("header must start with `date,asset`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let feature_names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    for req in &options.required_features {
        if !feature_names.contains(req) {
            return Err(parse_err(1, format!("missing required column `{req}`")));
        }
    }

    let mut asset_order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, AssetRows> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("bad date `{}`: {e}", &record[0])))?;
        let asset = record[1].to_string();
        if asset.is_empty() {
            return Err(parse_err(line, "empty asset identifier".into()));
        }
        let values = record
            .iter()
            .skip(2)
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("bad number `{s}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if !rows.contains_key(&asset) {
            asset_order.push(asset.clone());
        }
        if rows
            .entry(asset.clone())
            .or_default()
            .insert(date, values)
            .is_some()
        {
            return Err(parse_err(line, format!("duplicate row for {asset} on {date}")));
        }
    }
    if asset_order.is_empty() {
        return Err(parse_err(1, "file has no data rows".into()));
    }

    let per_asset: Vec<&AssetRows> = asset_order.iter().map(|a| &rows[a]).collect();
    let (dates, features) = match options.align {
        AlignPolicy::Intersection => intersect(&per_asset),
        AlignPolicy::ForwardFill => forward_fill(&per_asset, &feature_names),
    };
    if dates.len() < options.min_days {
        return Err(Error::InsufficientData {
            needed: options.min_days,
            available: dates.len(),
        });
    }
    MarketFrame::new(asset_order, dates, feature_names, features)
}

fn intersect(per_asset: &[&AssetRows]) -> (Vec<NaiveDate>, Vec<f64>) {
    let dates: Vec<NaiveDate> = per_asset[0]
        .keys()
        .filter(|d| per_asset.iter().all(|rows| rows.contains_key(d)))
        .copied()
        .collect();
    let mut features = Vec::new();
    for d in &dates {
        for rows in per_asset {
            features.extend_from_slice(&rows[d]);
        }
    }
    (dates, features)
}

fn forward_fill(per_asset: &[&AssetRows], feature_names: &[String]) -> (Vec<NaiveDate>, Vec<f64>) {
    let union: BTreeSet<NaiveDate> = per_asset.iter().flat_map(|r| r.keys().copied()).collect();
    let close_idx = feature_names.iter().position(|f| f == "close");
    let is_price = |name: &str| OHLC.contains(&name);
    let mut last: Vec<Option<Vec<f64>>> = vec![None; per_asset.len()];
    let mut dates = Vec::new();
    let mut features = Vec::new();
    for d in union {
        let mut day = Vec::with_capacity(per_asset.len() * feature_names.len());
        let mut complete = true;
        for (i, rows) in per_asset.iter().enumerate() {
            let values = match rows.get(&d) {
                Some(v) => v.clone(),
                None => match (&last[i], close_idx) {
                    (Some(prev), Some(ci)) => feature_names
                        .iter()
                        .enumerate()
                        .map(|(k, name)| if is_price(name) { prev[ci] } else { prev[k] })
                        .collect(),
                    _ => {
                        complete = false;
                        continue;
                    }
                },
            };
            last[i] = Some(values.clone());
            day.extend(values);
        }
        if complete {
            dates.push(d);
            features.extend(day);
        }
    }
    (dates, features)
}

/// Write a frame in the same long format `load_csv` reads.
pub fn save_csv(frame: &MarketFrame, path: &Path) -> Result<()> {
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("writing {}", path.display()), io),
        other => Error::Contract(format!("csv writer: {other:?}")),
    };
    let mut writer = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header = vec!["date".to_string(), "asset".to_string()];
    header.extend(frame.feature_names().iter().cloned());
    writer.write_record(&header).map_err(io_err)?;
    for (day, date) in frame.dates().iter().enumerate() {
        let date = date.format("%Y-%m-%d").to_string();
        for (asset, name) in frame.assets().iter().enumerate() {
            let mut rec = vec![date.clone(), name.clone()];
            rec.extend(frame.row(day, asset).iter().map(|v| v.to_string()));
            writer.write_record(&rec).map_err(io_err)?;
        }
    }
    writer
        .flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
