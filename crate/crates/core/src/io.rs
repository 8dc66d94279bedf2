//! On-disk formats: training sets, GP models, bounds, trajectories.
//!
//! A training-set file is the 8-byte magic `DROCTS01`, a little-endian `u64`
//! header length, a JSON header, then `f64` little-endian columns: each state
//! coordinate over all `m` states, followed by each noise coordinate over all
//! `m·N` realizations (state-major, realization-minor).

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{DrocError, Result};
use crate::gp::{GpSet, GpSetFile};
use crate::kl_bound::HorizonBound;
use crate::mpc::MpcRecord;
use crate::noise::{GridSpec, TrainingSet};

const MAGIC: &[u8; 8] = b"DROCTS01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainingHeader {
    schema_version: u32,
    state_dim: usize,
    noise_dim: usize,
    num_states: usize,
    samples_per_state: usize,
    grid: Option<GridSpec>,
    seed: Option<u64>,
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_training_set(ts: &TrainingSet) -> Vec<u8> {
    let header = TrainingHeader {
        schema_version: 1,
        state_dim: ts.state_dim(),
        noise_dim: ts.noise_dim,
        num_states: ts.num_states(),
        samples_per_state: ts.samples_per_state,
        grid: ts.grid.clone(),
        seed: ts.seed,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let m = ts.num_states();
    let rows = m * ts.samples_per_state;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * (m * header.state_dim + rows * ts.noise_dim));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for i in 0..header.state_dim {
        for s in &ts.states {
            out.extend_from_slice(&s[i].to_le_bytes());
        }
    }
    for i in 0..ts.noise_dim {
        for row in 0..rows {
            out.extend_from_slice(&ts.noise[row * ts.noise_dim + i].to_le_bytes());
        }
    }
    out
}

pub fn decode_training_set(bytes: &[u8]) -> Result<TrainingSet> {
    let fmt = |m: &str| DrocError::Format(m.into());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fmt("not a training-set file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt("truncated header"))?;
    let header: TrainingHeader = serde_json::from_slice(&bytes[16..body])?;
    if header.schema_version != 1 {
        return Err(fmt("unsupported training-set schema version"));
    }
    let m = header.num_states;
    let rows = m
        .checked_mul(header.samples_per_state)
        .ok_or_else(|| fmt("sizes overflow"))?;
    let values = m * header.state_dim + rows * header.noise_dim;
    if bytes.len() - body != values * 8 {
        return Err(fmt("payload length does not match header"));
    }
    let read = |k: usize| {
        let at = body + 8 * k;
        f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
    };
    let states = (0..m)
        .map(|j| DVector::from_fn(header.state_dim, |i, _| read(i * m + j)))
        .collect();
    let offset = m * header.state_dim;
    let mut noise = vec![0.0; rows * header.noise_dim];
    for i in 0..header.noise_dim {
        for row in 0..rows {
            noise[row * header.noise_dim + i] = read(offset + i * rows + row);
        }
    }
    let mut ts = TrainingSet::new(states, header.samples_per_state, header.noise_dim, noise)?;
    ts.grid = header.grid;
    ts.seed = header.seed;
    Ok(ts)
}

pub fn save_training_set(path: &Path, ts: &TrainingSet) -> Result<()> {
    write_atomic(path, &encode_training_set(ts))
}

pub fn load_training_set(path: &Path) -> Result<TrainingSet> {
    decode_training_set(&fs::read(path)?)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn save_gp_set(path: &Path, gps: &GpSet) -> Result<()> {
    save_json(path, &gps.to_file())
}

pub fn load_gp_set(path: &Path) -> Result<GpSet> {
    let file: GpSetFile = load_json(path)?;
    if file.schema_version != 1 {
        return Err(DrocError::Format("unsupported GP schema version".into()));
    }
    GpSet::from_file(file)
}

/// Persisted radius estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundFile {
    pub schema_version: u32,
    pub d_max: f64,
    pub per_window: Vec<f64>,
    pub k: usize,
    #[serde(rename = "M")]
    pub reference_samples: usize,
    pub n: usize,
    pub seed: u64,
    pub degenerate: usize,
}

impl BoundFile {
    pub fn new(bound: &HorizonBound, k: usize, reference_samples: usize, n: usize, seed: u64) -> Self {
        BoundFile {
            schema_version: 1,
            d_max: bound.d_max,
            per_window: bound.per_window.clone(),
            k,
            reference_samples,
            n,
            seed,
            degenerate: bound.degenerate,
        }
    }
}

/// Minimal CSV builder; floats use the shortest representation that parses
/// back to the same value.
#[derive(Debug, Default)]
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut c = Csv::default();
        c.buf.push_str(&header.join(","));
        c.buf.push('\n');
        c
    }

    pub fn row<I: IntoIterator<Item = Option<f64>>>(&mut self, fields: I) {
        let cells: Vec<String> = fields
            .into_iter()
            .map(|f| f.map_or_else(String::new, |v| format!("{v}")))
            .collect();
        self.buf.push_str(&cells.join(","));
        self.buf.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.buf.as_bytes())
    }
}

pub const TRAJECTORY_HEADER: [&str; 8] = ["t", "x", "y", "theta", "v", "a", "delta", "theta_star"];

/// One row per state (`iterations + 1`); the last row has empty control and
/// `θ*` fields.
pub fn trajectory_csv(record: &MpcRecord) -> Csv {
    let mut csv = Csv::new(&TRAJECTORY_HEADER);
    for (t, s) in record.states.iter().enumerate() {
        let u = record.controls.get(t);
        let mut row = vec![Some(t as f64)];
        row.extend(s.iter().map(|&v| Some(v)));
        row.push(u.map(|u| u[0]));
        row.push(u.map(|u| u[1]));
        row.push(record.theta_star.get(t).copied());
        csv.row(row);
    }
    csv
}

/// Rebuilds a record from a trajectory CSV. Fields not stored in the file
/// (noise hash, fallbacks, fault text) are left empty.
pub fn read_trajectory_csv(text: &str, mode: crate::mpc::Mode) -> Result<MpcRecord> {
    let (header, rows) = parse_csv(text)?;
    if header != TRAJECTORY_HEADER {
        return Err(DrocError::Format("not a trajectory CSV".into()));
    }
    let mut rec = MpcRecord {
        mode,
        states: Vec::new(),
        controls: Vec::new(),
        theta_star: Vec::new(),
        final_distance: f64::NAN,
        noise_stream_hash: 0,
        fallbacks: 0,
        complete: true,
        fault: None,
    };
    let missing = || DrocError::Format("missing state value in trajectory CSV".into());
    for row in &rows {
        rec.states.push(
            row[1..5]
                .iter()
                .map(|v| v.ok_or_else(missing))
                .collect::<Result<Vec<_>>>()?,
        );
        if let (Some(a), Some(delta), Some(th)) = (row[5], row[6], row[7]) {
            rec.controls.push(vec![a, delta]);
            rec.theta_star.push(th);
        }
    }
    let last = rec.states.last().ok_or_else(|| DrocError::Format("empty trajectory".into()))?;
    rec.final_distance = last[0].hypot(last[1]);
    Ok(rec)
}

/// Header and rows of a parsed CSV; empty fields are `None`.
pub type CsvTable = (Vec<String>, Vec<Vec<Option<f64>>>);

/// Parses a CSV written by [`Csv`] into a header and rows of optional values.
pub fn parse_csv(text: &str) -> Result<CsvTable> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DrocError::Format("empty CSV".into()))?
        .split(',')
        .map(str::to_owned)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for line in lines {
        let row = line
            .split(',')
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .map(Some)
                        .map_err(|_| DrocError::Format(format!("bad CSV number {c:?}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(DrocError::Format("ragged CSV row".into()));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::Mode;

    fn small_set() -> TrainingSet {
        let states = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, -4.5])];
        let noise = (0..2 * 3 * 2).map(|k| k as f64 * 0.1 - 0.3).collect();
        let mut ts = TrainingSet::new(states, 3, 2, noise).unwrap();
        ts.seed = Some(42);
        ts
    }

    #[test]
    fn training_set_round_trip() {
        let ts = small_set();
        let bytes = encode_training_set(&ts);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(decode_training_set(&bytes).unwrap(), ts);
    }

    #[test]
    fn training_set_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/train.bin");
        let ts = small_set();
        save_training_set(&path, &ts).unwrap();
        assert_eq!(load_training_set(&path).unwrap(), ts);
    }

    #[test]
    fn corrupt_training_files_are_rejected() {
        let bytes = encode_training_set(&small_set());
        assert!(decode_training_set(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_training_set(b"DROCTS01").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_training_set(&bad).is_err());
        let mut huge = bytes;
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_training_set(&huge).is_err());
    }

    #[test]
    fn trajectory_csv_shape_and_values() {
        let rec = MpcRecord {
            mode: Mode::Ilqg,
            states: vec![vec![5.0, 5.0, -2.0, 0.0], vec![4.9, 4.8, -2.1, 0.3]],
            controls: vec![vec![3.0, 0.1]],
            theta_star: vec![0.0],
            final_distance: 4.9f64.hypot(4.8),
            noise_stream_hash: 1,
            fallbacks: 0,
            complete: true,
            fault: None,
        };
        let csv = trajectory_csv(&rec);
        let (header, rows) = parse_csv(csv.as_str()).unwrap();
        assert_eq!(header, TRAJECTORY_HEADER);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0][5], Some(3.0));
        assert_eq!(rows[1][1], Some(4.9));
        assert_eq!(rows[1][5], None);
        assert_eq!(rows[1][7], None);
        let back = read_trajectory_csv(csv.as_str(), Mode::Ilqg).unwrap();
        assert_eq!(back.states, rec.states);
        assert_eq!(back.controls, rec.controls);
        assert_eq!(back.final_distance, rec.final_distance);
    }

    #[test]
    fn floats_survive_csv_exactly() {
        let vals = [0.1 + 0.2, 1e-300, -3.0e17, std::f64::consts::PI];
        let mut csv = Csv::new(&["v"]);
        for v in vals {
            csv.row([Some(v)]);
        }
        let (_, rows) = parse_csv(csv.as_str()).unwrap();
        for (r, v) in rows.iter().zip(vals) {
            assert_eq!(r[0].unwrap().to_bits(), v.to_bits());
        }
    }
}
