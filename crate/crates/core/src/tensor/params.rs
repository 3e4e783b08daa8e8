use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Tensor;
use crate::error::{Error, Result};

const CHECKPOINT_HEADER: &str = "#checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Glorot uniform over `rows + cols`.
    Xavier,
    Normal(f64),
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n = rows * cols;
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(v) => vec![v; n],
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let u = Uniform::new_inclusive(-a, a);
                (0..n).map(|_| u.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Config(format!("{name}: {e}")))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        self.names.push(name.to_string());
        self.values.push(Tensor::new(rows, cols, data)?);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Text checkpoint. Values are written with the shortest representation
    /// that parses back to the same `f64`, so a round trip is exact.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_HEADER}");
        for (name, t) in self.names.iter().zip(&self.values) {
            let _ = writeln!(s, "param {name} {} {}", t.rows(), t.cols());
            let row: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { path: source.to_string(), line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
            _ => return Err(perr(1, format!("expected header {CHECKPOINT_HEADER}"))),
        }
        let mut store = ParamStore::new();
        while let Some((ln, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 || f[0] != "param" {
                return Err(perr(ln, format!("expected 'param NAME ROWS COLS', got {line:?}")));
            }
            let rows: usize = f[2].parse().map_err(|e| perr(ln, format!("rows: {e}")))?;
            let cols: usize = f[3].parse().map_err(|e| perr(ln, format!("cols: {e}")))?;
            let (vl, values) = lines.next().ok_or_else(|| perr(ln, format!("missing values for {}", f[1])))?;
            let data = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(vl, format!("value: {e}")))?;
            if data.len() != rows * cols {
                return Err(perr(vl, format!("{} has {} values, expected {}", f[1], data.len(), rows * cols)));
            }
            if store.id(f[1]).is_some() {
                return Err(perr(ln, format!("duplicate parameter {}", f[1])));
            }
            store.names.push(f[1].to_string());
            store.values.push(Tensor::new(rows, cols, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    /// Copies values from `other`, which must have the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter sets differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::dim("assign_from", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            a.clone_from(b);
        }
        Ok(())
    }
}

/// The generator used for parameter initialization.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
