//! File formats: raw coefficient tensors, mask volumes, VTK export, and the
//! TOML problem, study and bench-plan files.
//!
//! Raw tensor layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `TBSF` |
//! | 4 | version (u32) |
//! | 4 | axis count (u32) |
//! | 8 per axis | extents (u64) |
//! | 1 | dtype: 0 = f32, 1 = f64 |
//! | 1 | degree, 255 = node samples |
//! | rest | payload, row-major |

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::bench::BenchPlan;
use crate::bspline::Extension;
use crate::domain::{Domain, Grid, MaskDomain};
use crate::error::{Result, TbsError};
use crate::operator::{OperatorConfig, Strategy};
use crate::pde::{Analytic, BcSpec, BoundaryCondition, FieldSpec, ProblemSpec, ProjectionMode, RunConfig};
use crate::real::Precision;
use crate::solver::{Preconditioner, SolveConfig};
use crate::tensor::CoeffTensor;
use crate::verify::ProblemFamily;

pub const TBSF_MAGIC: &[u8; 4] = b"TBSF";
pub const TBSF_VERSION: u32 = 1;
const NO_DEGREE: u8 = 255;
const MAX_AXES: u32 = 8;

/// Payload of a raw tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(CoeffTensor<f32>),
    F64(CoeffTensor<f64>),
}

impl TensorData {
    pub fn extents(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.extents(),
            TensorData::F64(t) => t.extents(),
        }
    }

    pub fn to_f64(&self) -> CoeffTensor<f64> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensorFile {
    /// Spline degree of coefficient payloads; `None` for node samples.
    pub degree: Option<usize>,
    pub data: TensorData,
}

impl RawTensorFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let ext = self.data.extents();
        let degree = match self.degree {
            None => NO_DEGREE,
            Some(d) if d < NO_DEGREE as usize => d as u8,
            Some(d) => return Err(TbsError::InputValidation(format!("degree {d} not representable"))),
        };
        let mut out = Vec::with_capacity(14 + 8 * ext.len());
        out.extend_from_slice(TBSF_MAGIC);
        out.extend_from_slice(&TBSF_VERSION.to_le_bytes());
        out.extend_from_slice(&(ext.len() as u32).to_le_bytes());
        for &e in ext {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(t) => {
                out.push(0);
                out.push(degree);
                out.reserve(4 * t.len());
                t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            TensorData::F64(t) => {
                out.push(1);
                out.push(degree);
                out.reserve(8 * t.len());
                t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() < pos + n {
                return Err(TbsError::Format {
                    offset: pos as u64,
                    message: format!("truncated {what}: need {n} bytes, {} remain", bytes.len() - pos),
                });
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4, "magic")? != TBSF_MAGIC {
            return Err(TbsError::Format {
                offset: 0,
                message: "bad magic, expected TBSF".into(),
            });
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
        if version != TBSF_VERSION {
            return Err(TbsError::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let axes = u32::from_le_bytes(take(4, "axis count")?.try_into().expect("4 bytes"));
        if axes == 0 || axes > MAX_AXES {
            return Err(TbsError::Format {
                offset: 8,
                message: format!("axis count {axes} outside 1..={MAX_AXES}"),
            });
        }
        let mut ext = Vec::with_capacity(axes as usize);
        for _ in 0..axes {
            let e = u64::from_le_bytes(take(8, "extents")?.try_into().expect("8 bytes"));
            ext.push(usize::try_from(e).map_err(|_| TbsError::Format {
                offset: 12,
                message: format!("extent {e} too large"),
            })?);
        }
        let tag_at = 12 + 8 * axes as u64;
        let dtype = take(1, "dtype")?[0];
        let degree = take(1, "degree")?[0];
        let count = ext.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or(TbsError::Format {
            offset: 12,
            message: "extent product overflows".into(),
        })?;
        let size = match dtype {
            0 => 4,
            1 => 8,
            t => {
                return Err(TbsError::Format {
                    offset: tag_at,
                    message: format!("unknown dtype tag {t}"),
                })
            }
        };
        let payload_at = pos;
        let expected = count * size;
        let actual = bytes.len() - payload_at;
        if actual != expected {
            return Err(TbsError::Format {
                offset: payload_at as u64,
                message: format!("payload length mismatch: expected {expected} bytes, found {actual}"),
            });
        }
        let payload = &bytes[payload_at..];
        let data = if size == 4 {
            let v = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            TensorData::F32(CoeffTensor::from_vec(ext, v)?)
        } else {
            let v = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            TensorData::F64(CoeffTensor::from_vec(ext, v)?)
        };
        Ok(Self {
            degree: (degree != NO_DEGREE).then_some(degree as usize),
            data,
        })
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| TbsError::InputValidation(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_tensor(path: &Path, file: &RawTensorFile) -> Result<()> {
    write_atomic(path, &file.encode()?)
}

pub fn read_tensor(path: &Path) -> Result<RawTensorFile> {
    RawTensorFile::decode(&fs::read(path)?)
}

/// 8-bit volume over grid cells with an occupancy threshold.
///
/// Text header line `TBSMASK <extents...> threshold <t>` followed by the raw bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFile {
    /// Cells per axis.
    pub extents: Vec<usize>,
    pub threshold: u8,
    pub values: Vec<u8>,
}

impl MaskFile {
    pub fn occupancy(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v >= self.threshold).collect()
    }

    pub fn occupied_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= self.threshold).count()
    }

    /// Mask domain on a grid with one cell per voxel.
    pub fn to_domain(&self, step: Vec<f64>, origin: Vec<f64>) -> Result<MaskDomain> {
        let grid = Grid::new(self.extents.iter().map(|c| c + 1).collect(), step, origin)?;
        MaskDomain::new(grid, self.occupancy())
    }

    pub fn encode(&self) -> Vec<u8> {
        let ext: Vec<String> = self.extents.iter().map(|e| e.to_string()).collect();
        let mut out = format!("TBSMASK {} threshold {}\n", ext.join(" "), self.threshold).into_bytes();
        out.extend_from_slice(&self.values);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or(TbsError::Format {
            offset: 0,
            message: "mask header has no line end".into(),
        })?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| TbsError::Format {
            offset: 0,
            message: "mask header is not text".into(),
        })?;
        let words: Vec<&str> = header.split_whitespace().collect();
        let bad = |m: &str| TbsError::Format {
            offset: 0,
            message: format!("{m} in mask header {header:?}"),
        };
        if words.first() != Some(&"TBSMASK") {
            return Err(bad("missing TBSMASK tag"));
        }
        let t = words.iter().position(|&w| w == "threshold").ok_or_else(|| bad("missing threshold"))?;
        if t + 2 != words.len() || t < 2 {
            return Err(bad("malformed fields"));
        }
        let extents = words[1..t]
            .iter()
            .map(|w| w.parse::<usize>().map_err(|_| bad("bad extent")))
            .collect::<Result<Vec<_>>>()?;
        let threshold = words[t + 1].parse::<u8>().map_err(|_| bad("bad threshold"))?;
        let values = bytes[nl + 1..].to_vec();
        let expected: usize = extents.iter().product();
        if values.len() != expected {
            return Err(TbsError::Format {
                offset: nl as u64 + 1,
                message: format!("mask volume length mismatch: expected {expected} bytes, found {}", values.len()),
            });
        }
        Ok(Self {
            extents,
            threshold,
            values,
        })
    }
}

pub fn read_mask(path: &Path) -> Result<MaskFile> {
    MaskFile::decode(&fs::read(path)?)
}

pub fn write_mask(path: &Path, mask: &MaskFile) -> Result<()> {
    write_atomic(path, &mask.encode())
}

/// Legacy ASCII VTK structured-points text of node samples on `grid`.
///
/// VTK's x axis is the fastest-varying (last) tensor axis.
pub fn vtk_string(samples: &CoeffTensor<f64>, grid: &Grid, name: &str) -> Result<String> {
    samples.check_extents(grid.nodes())?;
    let d = grid.dim();
    if !(2..=3).contains(&d) {
        return Err(TbsError::InputValidation(format!("VTK export needs a 2-D or 3-D field, got {d}-D")));
    }
    let rev = |v: &[f64], pad: f64| -> [f64; 3] {
        let mut out = [pad; 3];
        for (i, x) in v.iter().rev().enumerate() {
            out[i] = *x;
        }
        out
    };
    let nodes: Vec<f64> = grid.nodes().iter().map(|&n| n as f64).collect();
    let n = rev(&nodes, 1.0);
    let h = rev(grid.step(), 1.0);
    let o = rev(grid.origin(), 0.0);
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{name}");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(s, "DIMENSIONS {} {} {}", n[0], n[1], n[2]);
    let _ = writeln!(s, "ORIGIN {} {} {}", o[0], o[1], o[2]);
    let _ = writeln!(s, "SPACING {} {} {}", h[0], h[1], h[2]);
    let _ = writeln!(s, "POINT_DATA {}", samples.len());
    let _ = writeln!(s, "SCALARS {name} double 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    let row = *grid.nodes().last().expect("dim >= 2");
    for line in samples.data().chunks(row) {
        let vals: Vec<String> = line.iter().map(|v| format!("{v}")).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    Ok(s)
}

pub fn export_vtk(path: &Path, samples: &CoeffTensor<f64>, grid: &Grid) -> Result<()> {
    write_atomic(path, vtk_string(samples, grid, "phi")?.as_bytes())
}

/// Header fields of a legacy structured-points VTK file.
#[derive(Debug, Clone, PartialEq)]
pub struct VtkHeader {
    pub dimensions: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub points: usize,
}

/// Parses and checks a legacy ASCII structured-points file: header, counts and finiteness.
pub fn validate_vtk(text: &str) -> Result<VtkHeader> {
    let bad = |m: String| TbsError::Format { offset: 0, message: m };
    let mut lines = text.lines();
    if !lines.next().is_some_and(|l| l.starts_with("# vtk DataFile Version")) {
        return Err(bad("missing VTK version line".into()));
    }
    lines.next();
    if lines.next() != Some("ASCII") {
        return Err(bad("not an ASCII file".into()));
    }
    if lines.next() != Some("DATASET STRUCTURED_POINTS") {
        return Err(bad("not STRUCTURED_POINTS".into()));
    }
    let mut triple = |key: &str| -> Result<[f64; 3]> {
        let l = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
        let w: Vec<&str> = l.split_whitespace().collect();
        if w.len() != 4 || w[0] != key {
            return Err(bad(format!("expected {key}, found {l:?}")));
        }
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = w[i + 1].parse().map_err(|_| bad(format!("bad {key} value {:?}", w[i + 1])))?;
        }
        Ok(out)
    };
    let dims = triple("DIMENSIONS")?;
    let origin = triple("ORIGIN")?;
    let spacing = triple("SPACING")?;
    let dimensions = dims.map(|v| v as usize);
    let points: usize = dimensions.iter().product();
    let pd = lines.next().unwrap_or_default();
    if pd != format!("POINT_DATA {points}") {
        return Err(bad(format!("expected POINT_DATA {points}, found {pd:?}")));
    }
    if !lines.next().is_some_and(|l| l.starts_with("SCALARS ")) {
        return Err(bad("missing SCALARS".into()));
    }
    if lines.next() != Some("LOOKUP_TABLE default") {
        return Err(bad("missing LOOKUP_TABLE".into()));
    }
    let mut count = 0usize;
    for l in lines {
        for w in l.split_whitespace() {
            let v: f64 = w.parse().map_err(|_| bad(format!("bad scalar {w:?}")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite scalar {v}")));
            }
            count += 1;
        }
    }
    if count != points {
        return Err(bad(format!("expected {points} scalars, found {count}")));
    }
    Ok(VtkHeader {
        dimensions,
        origin,
        spacing,
        points,
    })
}

/// A field value in a problem file: a number, a node-sample file, or an analytic form.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(untagged)]
pub enum FieldValue {
    Constant(f64),
    File { file: PathBuf },
    Gaussian { gaussian: GaussianParams },
    Cosine { cosine: CosineParams },
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianParams {
    pub center: Vec<f64>,
    pub width: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct CosineParams {
    pub wavenumbers: Vec<f64>,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Node counts; omitted when a mask file defines them.
    pub nodes: Option<Vec<usize>>,
    pub lower: Vec<f64>,
    /// Upper corner; either this or `step`.
    pub upper: Option<Vec<f64>>,
    pub step: Option<Vec<f64>>,
    /// Mask file; nodes are its cell extents plus one.
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsSection {
    pub degree: usize,
    pub param_degree: Option<usize>,
    pub source_degree: Option<usize>,
    pub diffusion: FieldValue,
    #[serde(default = "zero_field")]
    pub absorption: FieldValue,
    #[serde(default = "zero_field")]
    pub source: FieldValue,
    #[serde(default)]
    pub projection: ProjectionMode,
    #[serde(default)]
    pub extension: Option<String>,
}

fn zero_field() -> FieldValue {
    FieldValue::Constant(0.0)
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(untagged)]
pub enum BcSection {
    PerFace { faces: Vec<BoundaryCondition> },
    Global(BoundaryCondition),
}

#[derive(Debug, Clone, PartialEq, Default, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub precond: Option<Preconditioner>,
    pub coarse_init: Option<usize>,
    pub strategy: Option<Strategy>,
    pub threads: Option<usize>,
    pub precision: Option<Precision>,
    pub record_history: Option<bool>,
    pub memory_budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub solution: String,
    pub report: String,
    pub history: Option<String>,
    pub vtk: Option<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            solution: "solution.tbsf".into(),
            report: "report.csv".into(),
            history: None,
            vtk: None,
        }
    }
}

/// Problem definition file.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub grid: GridSection,
    pub fields: FieldsSection,
    pub bc: BcSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| TbsError::Configuration(format!("{what}: {e}")))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self> {
        parse_toml(text, "problem file")
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Builds the problem; relative file paths resolve against `base`.
    pub fn to_spec(&self, base: &Path) -> Result<ProblemSpec> {
        let g = &self.grid;
        let domain = if let Some(m) = &g.mask {
            let mask = read_mask(&resolve(base, m))?;
            let step = match (&g.step, &g.upper) {
                (Some(s), _) => s.clone(),
                (None, Some(u)) => u
                    .iter()
                    .zip(&g.lower)
                    .zip(&mask.extents)
                    .map(|((u, l), c)| (u - l) / *c as f64)
                    .collect(),
                (None, None) => vec![1.0; mask.extents.len()],
            };
            Domain::Mask(mask.to_domain(step, g.lower.clone())?)
        } else {
            let nodes = g
                .nodes
                .clone()
                .ok_or_else(|| TbsError::Configuration("[grid] needs nodes or mask".into()))?;
            let grid = match (&g.step, &g.upper) {
                (Some(s), None) => Grid::new(nodes, s.clone(), g.lower.clone())?,
                (None, Some(u)) => Grid::spanning(&g.lower, u, &nodes)?,
                _ => return Err(TbsError::Configuration("[grid] needs exactly one of upper or step".into())),
            };
            Domain::boxed(grid)
        };
        let dim = domain.grid().dim();
        let field = |v: &FieldValue| -> Result<FieldSpec> {
            Ok(match v {
                FieldValue::Constant(c) => FieldSpec::Constant(*c),
                FieldValue::File { file } => FieldSpec::Sampled(read_tensor(&resolve(base, file))?.data.to_f64()),
                FieldValue::Gaussian { gaussian: p } => {
                    if p.center.len() != dim {
                        return Err(TbsError::Configuration(format!("gaussian center needs {dim} coordinates")));
                    }
                    FieldSpec::Analytic(Analytic::Gaussian {
                        center: p.center.clone(),
                        width: p.width,
                        amplitude: p.amplitude,
                    })
                }
                FieldValue::Cosine { cosine: p } => {
                    if p.wavenumbers.len() != dim {
                        return Err(TbsError::Configuration(format!("cosine wavenumbers need {dim} entries")));
                    }
                    FieldSpec::Analytic(Analytic::CosineProduct {
                        amplitude: p.amplitude,
                        wavenumbers: p.wavenumbers.clone(),
                    })
                }
            })
        };
        let f = &self.fields;
        let bc = match &self.bc {
            BcSection::Global(b) => BcSpec::Global(*b),
            BcSection::PerFace { faces } => BcSpec::PerFace(faces.clone()),
        };
        let mut spec = ProblemSpec::new(domain, f.degree, field(&f.diffusion)?, field(&f.absorption)?, field(&f.source)?, bc);
        spec.np = f.param_degree.unwrap_or(f.degree);
        spec.ns = f.source_degree.unwrap_or(f.degree);
        spec.projection = f.projection;
        if let Some(e) = &f.extension {
            spec.extension = e.parse::<Extension>().map_err(TbsError::Configuration)?;
        }
        if let Some(p) = self.solver.precision {
            spec.precision = p;
        }
        Ok(spec)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let s = &self.solver;
        let d = SolveConfig::default();
        let o = OperatorConfig::default();
        let cfg = RunConfig {
            solve: SolveConfig {
                tol: s.tol.unwrap_or(d.tol),
                max_iter: s.max_iter.unwrap_or(d.max_iter),
                precond: s.precond.unwrap_or(d.precond),
                coarse_init: s.coarse_init,
                record_history: s.record_history.unwrap_or(self.output.history.is_some()),
            },
            operator: OperatorConfig {
                strategy: s.strategy.unwrap_or(o.strategy),
                threads: s.threads.unwrap_or(o.threads),
                memory_budget: s.memory_budget.unwrap_or(o.memory_budget),
                ..o
            },
        };
        cfg.solve.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyOutput {
    pub dir: Option<PathBuf>,
    pub csv: Option<String>,
    pub gnuplot: Option<String>,
}

/// Convergence study file.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct StudyFile {
    pub family: ProblemFamily,
    pub degrees: Vec<usize>,
    pub levels: Vec<usize>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: StudyOutput,
}

impl StudyFile {
    pub fn parse(text: &str) -> Result<Self> {
        parse_toml(text, "study file")
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        ProblemFile {
            grid: GridSection {
                nodes: None,
                lower: vec![],
                upper: None,
                step: None,
                mask: None,
            },
            fields: FieldsSection {
                degree: 1,
                param_degree: None,
                source_degree: None,
                diffusion: zero_field(),
                absorption: zero_field(),
                source: zero_field(),
                projection: ProjectionMode::Interpolation,
                extension: None,
            },
            bc: BcSection::Global(BoundaryCondition::Neumann),
            solver: self.solver.clone(),
            output: OutputSection::default(),
        }
        .run_config()
    }
}

pub fn parse_bench_plan(text: &str) -> Result<BenchPlan> {
    let plan: BenchPlan = parse_toml(text, "bench plan")?;
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = CoeffTensor::from_vec(vec![3, 4, 5], (0..60).map(|_| rng.gen::<f64>() * 1e3 - 5e2).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tbsf");
        let f = RawTensorFile {
            degree: Some(3),
            data: TensorData::F64(t.clone()),
        };
        write_tensor(&p, &f).unwrap();
        let g = read_tensor(&p).unwrap();
        assert_eq!(g, f);
        let TensorData::F64(u) = g.data else { panic!() };
        assert!(u.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let f32s = RawTensorFile {
            degree: None,
            data: TensorData::F32(CoeffTensor::from_vec(vec![2], vec![1.5f32, -0.25]).unwrap()),
        };
        assert_eq!(RawTensorFile::decode(&f32s.encode().unwrap()).unwrap(), f32s);
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let f = RawTensorFile {
            degree: None,
            data: TensorData::F64(CoeffTensor::zeros(vec![4, 4])),
        };
        let bytes = f.encode().unwrap();
        let err = RawTensorFile::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 128") && msg.contains("found 125"), "{msg}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(RawTensorFile::decode(&bad), Err(TbsError::Format { offset: 0, .. })));
        assert!(matches!(RawTensorFile::decode(&bytes[..10]), Err(TbsError::Format { offset: 8, .. })));
    }

    #[test]
    fn mask_threshold_counts_gradient() {
        let values: Vec<u8> = (0..256).map(|i| i as u8).collect();
        let m = MaskFile {
            extents: vec![4, 8, 8],
            threshold: 128,
            values,
        };
        let back = MaskFile::decode(&m.encode()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.occupied_count(), 128);
        let d = back.to_domain(vec![1.0; 3], vec![0.0; 3]).unwrap();
        assert_eq!(d.grid().nodes(), &[5, 9, 9]);
        let mut short = m.encode();
        short.pop();
        assert!(matches!(MaskFile::decode(&short), Err(TbsError::Format { .. })));
    }

    #[test]
    fn vtk_golden_constant_cube() {
        let g = Grid::new(vec![2, 2, 2], vec![0.5, 0.5, 0.5], vec![0.0; 3]).unwrap();
        let s = vtk_string(&CoeffTensor::filled(vec![2, 2, 2], 3.0), &g, "phi").unwrap();
        let golden = "# vtk DataFile Version 3.0\nphi\nASCII\nDATASET STRUCTURED_POINTS\nDIMENSIONS 2 2 2\nORIGIN 0 0 0\nSPACING 0.5 0.5 0.5\nPOINT_DATA 8\nSCALARS phi double 1\nLOOKUP_TABLE default\n3 3\n3 3\n3 3\n3 3\n";
        assert_eq!(s, golden);
        let h = validate_vtk(&s).unwrap();
        assert_eq!(h.spacing, [0.5; 3]);
    }

    #[test]
    fn vtk_axes_are_reversed() {
        let g = Grid::new(vec![3, 2], vec![0.1, 0.2], vec![1.0, 2.0]).unwrap();
        let s = vtk_string(&CoeffTensor::zeros(vec![3, 2]), &g, "phi").unwrap();
        let h = validate_vtk(&s).unwrap();
        assert_eq!(h.dimensions, [2, 3, 1]);
        assert_eq!(h.spacing, [0.2, 0.1, 1.0]);
        assert_eq!(h.origin, [2.0, 1.0, 0.0]);
        let g1 = Grid::new(vec![3], vec![0.1], vec![0.0]).unwrap();
        assert!(vtk_string(&CoeffTensor::zeros(vec![3]), &g1, "phi").is_err());
    }

    #[test]
    fn problem_file_parses() {
        let text = r#"
[grid]
nodes = [9, 9]
lower = [0.0, 0.0]
upper = [1.0, 1.0]

[fields]
degree = 2
diffusion = 1.0
absorption = 1.0
source = { cosine = { amplitude = 20.74, wavenumbers = [3.14159, 3.14159] } }

[bc]
kind = "penalty"
g = 20.0

[solver]
tol = 1e-10
strategy = "block-tensor"
"#;
        let p = ProblemFile::parse(text).unwrap();
        let spec = p.to_spec(Path::new(".")).unwrap();
        assert_eq!(spec.nb, 2);
        assert!(matches!(spec.bc, BcSpec::Global(BoundaryCondition::DirichletPenalty { g, epsilon: None }) if g == 20.0));
        let cfg = p.run_config().unwrap();
        assert_eq!(cfg.operator.strategy, Strategy::Block);
        assert_eq!(cfg.solve.tol, 1e-10);
        assert!(ProblemFile::parse(&text.replace("tol =", "tolerance =")).is_err());
        let faces = "[grid]\nnodes=[5]\nlower=[0.0]\nstep=[0.25]\n[fields]\ndegree=1\ndiffusion=1.0\n[bc]\nfaces=[{kind=\"neumann\"},{kind=\"robin\"}]\n";
        let spec = ProblemFile::parse(faces).unwrap().to_spec(Path::new(".")).unwrap();
        assert!(matches!(&spec.bc, BcSpec::PerFace(f) if f[1] == BoundaryCondition::Robin { gamma: 1.0 }));
    }

    #[test]
    fn study_file_parses() {
        let s = StudyFile::parse("degrees=[1,2]\nlevels=[0,1,2]\n[family]\nkind=\"cosine2d\"\nbase_step=0.5\n").unwrap();
        assert!(matches!(s.family, ProblemFamily::Cosine2d(ref c) if c.base_step == 0.5));
        assert!(StudyFile::parse("degrees=[1]\nlevels=[0,1,2]\n[family]\nkind=\"cosine2d\"\nbogus=1\n").is_err());
    }
}
