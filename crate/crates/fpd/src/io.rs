//! File formats: trajectory CSV, density CSV, kernel descriptors and
//! kernel matrices, plus hashed artifact output.
//!
//! Numbers are written in shortest round-trip form, so every file reloads to
//! bit-identical values and reruns produce byte-identical files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use fpd_core::datakit::{Sample, TrajectorySet, Trip};
use fpd_core::density::{Conditioning, ConditionalKernel, Grid, GridDensity, KernelBody, KernelRole, LinearGaussian};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Shortest round-trip decimal, switching to exponent form for very small
/// or very large magnitudes.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes files under a root directory and records their hashes.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(ArtifactWriter {
            root: root.to_path_buf(),
            hashes: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        write_file(&self.root.join(rel), bytes)?;
        self.hashes.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn hashes(&self) -> &BTreeMap<String, String> {
        &self.hashes
    }
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn csv_records(path: &Path, bytes: &[u8]) -> CliResult<(Vec<String>, Vec<(u64, Vec<String>)>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(bytes);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::parse(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

fn parse_f64(path: &Path, line: u64, field: &str, what: &str) -> CliResult<f64> {
    field
        .parse::<f64>()
        .map_err(|_| CliError::parse(path, line, format!("{what}: `{field}` is not a number")))
}

/// Reads `trip_id,t,x,u[,extra...]`. Rows of a trip keep file order; trips
/// keep the order of their first row.
pub fn load_trajectories(path: &Path) -> CliResult<TrajectorySet> {
    let bytes = read_file(path)?;
    parse_trajectories(path, &bytes)
}

pub fn parse_trajectories(path: &Path, bytes: &[u8]) -> CliResult<TrajectorySet> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(fpd_core::Error::EmptyDataset.into());
    }
    let (header, rows) = csv_records(path, bytes)?;
    let expected = ["trip_id", "t", "x", "u"];
    if header.len() < 4 || header[..4] != expected {
        return Err(CliError::parse(path, 1, format!("header must start with trip_id,t,x,u, got {}", header.join(","))));
    }
    let channels: Vec<String> = header[4..].to_vec();
    let mut order: Vec<Trip> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (line, row) in rows {
        if row.len() != header.len() {
            return Err(CliError::parse(path, line, format!("{} fields, expected {}", row.len(), header.len())));
        }
        let t = parse_f64(path, line, &row[1], "t")?;
        let x = parse_f64(path, line, &row[2], "x")?;
        let u = parse_f64(path, line, &row[3], "u")?;
        let extras = row[4..]
            .iter()
            .zip(&channels)
            .map(|(f, c)| parse_f64(path, line, f, c))
            .collect::<CliResult<Vec<f64>>>()?;
        let slot = *index.entry(row[0].clone()).or_insert_with(|| {
            order.push(Trip {
                trip_id: row[0].clone(),
                samples: Vec::new(),
            });
            order.len() - 1
        });
        order[slot].samples.push(Sample { t, x, u, extras });
    }
    Ok(TrajectorySet::new(channels, order)?)
}

pub fn trajectories_bytes(ts: &TrajectorySet) -> Vec<u8> {
    let mut header: Vec<String> = ["trip_id", "t", "x", "u"].iter().map(|s| s.to_string()).collect();
    header.extend(ts.channels().iter().cloned());
    let rows = ts.trips().iter().flat_map(|trip| {
        trip.samples.iter().map(move |s| {
            let mut r = vec![trip.trip_id.clone(), num(s.t), num(s.x), num(s.u)];
            r.extend(s.extras.iter().map(|v| num(*v)));
            r
        })
    });
    csv_bytes(&header, rows)
}

/// Two-column density table with the given column names.
pub fn density_bytes(d: &GridDensity, coordinate: &str, weight: &str) -> Vec<u8> {
    let grid = d.grid();
    let rows = d
        .weights()
        .iter()
        .enumerate()
        .map(|(i, w)| vec![num(grid.coordinate(i)), num(*w)]);
    csv_bytes(&[coordinate.to_string(), weight.to_string()], rows)
}

fn grid_from_coordinates(path: &Path, coords: &[f64]) -> CliResult<Grid> {
    if coords.len() < 2 {
        return Err(CliError::parse(path, 1, "need at least two grid nodes"));
    }
    let grid = Grid::new(coords[0], coords[coords.len() - 1], coords.len())
        .map_err(|e| CliError::parse(path, 2, e.to_string()))?;
    let tol = 1e-9 * (grid.spacing() + grid.lower().abs().max(grid.upper().abs()));
    for (i, c) in coords.iter().enumerate() {
        if (grid.coordinate(i) - c).abs() > tol {
            return Err(CliError::parse(path, i as u64 + 2, format!("coordinate {c} breaks the uniform grid")));
        }
    }
    Ok(grid)
}

/// Grid and raw node values of a two-column density file.
pub fn read_density_table(path: &Path) -> CliResult<(Grid, Vec<f64>)> {
    let bytes = read_file(path)?;
    let (header, rows) = csv_records(path, &bytes)?;
    if header.len() != 2 {
        return Err(CliError::parse(path, 1, "density files have two columns"));
    }
    let mut coords = Vec::with_capacity(rows.len());
    let mut weights = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        if row.len() != 2 {
            return Err(CliError::parse(path, line, "expected two fields"));
        }
        coords.push(parse_f64(path, line, &row[0], &header[0])?);
        weights.push(parse_f64(path, line, &row[1], &header[1])?);
    }
    Ok((grid_from_coordinates(path, &coords)?, weights))
}

pub fn read_density(path: &Path) -> CliResult<GridDensity> {
    let (grid, weights) = read_density_table(path)?;
    Ok(GridDensity::new(grid, weights)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl From<&Grid> for GridSpec {
    fn from(g: &Grid) -> Self {
        GridSpec {
            lower: g.lower(),
            upper: g.upper(),
            points: g.points(),
        }
    }
}

impl GridSpec {
    pub fn grid(&self) -> CliResult<Grid> {
        Ok(Grid::new(self.lower, self.upper, self.points)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelBodySpec {
    LinearGaussian {
        intercept: f64,
        slopes: Vec<f64>,
        variance: f64,
    },
    /// Row matrix stored next to the descriptor.
    Table { file: String },
}

/// JSON descriptor of a kernel. Plant kernels condition on `(u, x)` and
/// have state outcomes; policy kernels condition on `x` and have control
/// outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub role: String,
    pub state_grid: GridSpec,
    pub control_grid: GridSpec,
    pub body: KernelBodySpec,
}

fn role_name(role: KernelRole) -> &'static str {
    match role {
        KernelRole::Plant => "plant",
        KernelRole::Policy => "policy",
        KernelRole::ReferencePlant => "reference_plant",
        KernelRole::ReferencePolicy => "reference_policy",
    }
}

fn role_from_name(s: &str) -> Option<KernelRole> {
    Some(match s {
        "plant" => KernelRole::Plant,
        "policy" => KernelRole::Policy,
        "reference_plant" => KernelRole::ReferencePlant,
        "reference_policy" => KernelRole::ReferencePolicy,
        _ => return None,
    })
}

fn is_plant(role: KernelRole) -> bool {
    matches!(role, KernelRole::Plant | KernelRole::ReferencePlant)
}

/// Row matrix CSV: conditioning coordinates (`x`, or `u,x`) then one column
/// per outcome node, headed by its coordinate.
pub fn kernel_matrix_bytes(kernel: &ConditionalKernel) -> Vec<u8> {
    let cond = kernel.conditioning();
    let mut header: Vec<String> = match cond {
        Conditioning::State(_) => vec!["x".into()],
        Conditioning::ControlState { .. } => vec!["u".into(), "x".into()],
    };
    header.extend(kernel.outcome().coordinates().into_iter().map(num));
    let mut buf = Vec::new();
    let rows = (0..kernel.rows()).map(|r| {
        kernel.row_into(r, &mut buf);
        let mut row: Vec<String> = cond.coordinates(r).into_iter().map(num).collect();
        row.extend(buf.iter().map(|v| num(*v)));
        row
    });
    csv_bytes(&header, rows.collect::<Vec<_>>().into_iter())
}

pub fn read_kernel_matrix(path: &Path, conditioning: Conditioning, outcome: Grid) -> CliResult<Vec<f64>> {
    let bytes = read_file(path)?;
    let (header, rows) = csv_records(path, &bytes)?;
    let lead = conditioning.arity();
    if header.len() != lead + outcome.points() {
        return Err(CliError::Mismatch(format!(
            "{}: {} columns, expected {}",
            path.display(),
            header.len(),
            lead + outcome.points()
        )));
    }
    for (i, h) in header[lead..].iter().enumerate() {
        let c = parse_f64(path, 1, h, "outcome coordinate")?;
        if (c - outcome.coordinate(i)).abs() > 1e-9 * (outcome.spacing() + c.abs()) {
            return Err(CliError::Mismatch(format!("{}: outcome grid differs at column {i}", path.display())));
        }
    }
    if rows.len() != conditioning.rows() {
        return Err(CliError::Mismatch(format!(
            "{}: {} rows, expected {}",
            path.display(),
            rows.len(),
            conditioning.rows()
        )));
    }
    let mut table = Vec::with_capacity(rows.len() * outcome.points());
    for (r, (line, row)) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(CliError::parse(path, *line, "ragged row"));
        }
        for (j, expected) in conditioning.coordinates(r).into_iter().enumerate() {
            let c = parse_f64(path, *line, &row[j], &header[j])?;
            if (c - expected).abs() > 1e-9 * (1.0 + expected.abs()) {
                return Err(CliError::Mismatch(format!(
                    "{}, line {line}: conditioning coordinate {c}, expected {expected}",
                    path.display()
                )));
            }
        }
        for f in &row[lead..] {
            table.push(parse_f64(path, *line, f, "density")?);
        }
    }
    Ok(table)
}

/// Writes `<stem>.json` (and `<stem>.csv` for tabulated kernels).
pub fn write_kernel(
    out: &mut ArtifactWriter,
    stem: &str,
    kernel: &ConditionalKernel,
    state: &Grid,
    control: &Grid,
) -> CliResult<()> {
    let body = match kernel.body() {
        KernelBody::LinearGaussian(p) => KernelBodySpec::LinearGaussian {
            intercept: p.intercept,
            slopes: p.slopes.clone(),
            variance: p.variance,
        },
        KernelBody::Table(_) => {
            let file = format!("{stem}.csv");
            out.write(&file, &kernel_matrix_bytes(kernel))?;
            KernelBodySpec::Table {
                file: Path::new(&file).file_name().unwrap().to_string_lossy().into_owned(),
            }
        }
    };
    let spec = KernelSpec {
        role: role_name(kernel.role()).into(),
        state_grid: state.into(),
        control_grid: control.into(),
        body,
    };
    out.write(&format!("{stem}.json"), &json_bytes(&spec))
}

pub fn read_kernel(path: &Path) -> CliResult<ConditionalKernel> {
    let bytes = read_file(path)?;
    let spec: KernelSpec =
        serde_json::from_slice(&bytes).map_err(|e| CliError::parse(path, e.line() as u64, e.to_string()))?;
    let role = role_from_name(&spec.role)
        .ok_or_else(|| CliError::parse(path, 1, format!("unknown kernel role `{}`", spec.role)))?;
    let state = spec.state_grid.grid()?;
    let control = spec.control_grid.grid()?;
    let (conditioning, outcome) = if is_plant(role) {
        (Conditioning::ControlState { control, state }, state)
    } else {
        (Conditioning::State(state), control)
    };
    Ok(match spec.body {
        KernelBodySpec::LinearGaussian {
            intercept,
            slopes,
            variance,
        } => ConditionalKernel::linear_gaussian(
            role,
            conditioning,
            outcome,
            LinearGaussian {
                intercept,
                slopes,
                variance,
            },
        )?,
        KernelBodySpec::Table { file } => {
            let dir = path.parent().unwrap_or(Path::new("."));
            let table = read_kernel_matrix(&dir.join(file), conditioning, outcome)?;
            ConditionalKernel::from_table(role, conditioning, outcome, table)?
        }
    })
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::parse(path, e.line() as u64, e.to_string()))
}
