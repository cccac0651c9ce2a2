//! Shape-based GEMM dispatch.
//!
//! A model only ever multiplies by a handful of `[N, K]` weight shapes, so
//! each one is profiled offline ([`profile_shape`]) to find two inflection
//! points on the batch dimension M: `m1`, where the flat GEMM starts beating
//! the GEMV kernel, and `m2`, where the conventional blocked GEMM starts
//! beating the flat one. At run time [`dispatch`] is a table lookup.

mod kernels;
mod profile;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use kernels::{impl_a_gemv, impl_b_flat, impl_c_blocked, KernelChoice};
pub use profile::{
    inflection_points, profile_shape, profile_shape_with, HostTimer, KernelTimer, ProfileOptions, ProfilePoint,
    ShapeProfile, DEFAULT_M_SWEEP, UNSTABLE_MAD_FRACTION,
};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const TABLE_MAGIC: &str = "flatdecode-dispatch";
pub const TABLE_VERSION: u32 = 1;

/// Inflection points for one `[N, K]` weight shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DispatchEntry {
    pub n: usize,
    pub k: usize,
    pub m1: usize,
    pub m2: usize,
}

impl DispatchEntry {
    pub fn new(n: usize, k: usize, m1: usize, m2: usize) -> Result<Self> {
        if n == 0 || k == 0 || m1 == 0 || m1 > m2 {
            return Err(Error::InvalidArgument(format!("invalid dispatch entry n={n} k={k} m1={m1} m2={m2}")));
        }
        Ok(Self { n, k, m1, m2 })
    }

    pub fn choose(&self, m: usize) -> KernelChoice {
        if m < self.m1 {
            KernelChoice::ImplA
        } else if m < self.m2 {
            KernelChoice::ImplB
        } else {
            KernelChoice::ImplC
        }
    }
}

/// Lookup table from `[N, K]` to inflection points, tagged with the machine
/// it was profiled on.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DispatchTable {
    entries: BTreeMap<(usize, usize), DispatchEntry>,
    pub fingerprint: String,
}

impl DispatchTable {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self { entries: BTreeMap::new(), fingerprint: fingerprint.into() }
    }

    /// Inserts or replaces the entry for `(e.n, e.k)`.
    pub fn insert(&mut self, e: DispatchEntry) -> Option<DispatchEntry> {
        self.entries.insert((e.n, e.k), e)
    }

    pub fn get(&self, n: usize, k: usize) -> Option<&DispatchEntry> {
        self.entries.get(&(n, k))
    }

    pub fn entries(&self) -> impl Iterator<Item = &DispatchEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> Result<String> {
        if self.fingerprint.contains(['\n', '\r']) {
            return Err(Error::InvalidArgument("fingerprint must be a single line".into()));
        }
        let mut s = format!("{TABLE_MAGIC} v{TABLE_VERSION}");
        if !self.fingerprint.is_empty() {
            s.push(' ');
            s.push_str(&self.fingerprint);
        }
        s.push('\n');
        for e in self.entries.values() {
            writeln!(s, "{} {} {} {}", e.n, e.k, e.m1, e.m2).unwrap();
        }
        Ok(s)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let mut parts = header.splitn(3, ' ');
        if parts.next() != Some(TABLE_MAGIC) {
            return Err(err(1, format!("expected `{TABLE_MAGIC} v{TABLE_VERSION} <fingerprint>` header")));
        }
        let version = parts.next().ok_or_else(|| err(1, "missing version".into()))?;
        match version.strip_prefix('v').map(str::parse::<u32>) {
            Some(Ok(TABLE_VERSION)) => {}
            Some(Ok(_)) => return Err(Error::VersionMismatch { found: version.into(), expected: TABLE_VERSION }),
            _ => return Err(err(1, format!("malformed version {version:?}"))),
        }
        let mut table = DispatchTable::new(parts.next().unwrap_or(""));

        for (no, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(err(no, format!("expected `N K M1 M2`, found {} field(s)", fields.len())));
            }
            let mut nums = [0usize; 4];
            for (slot, f) in nums.iter_mut().zip(&fields) {
                *slot = f.parse().map_err(|_| err(no, format!("not a non-negative integer: {f:?}")))?;
            }
            let e = DispatchEntry::new(nums[0], nums[1], nums[2], nums[3]).map_err(|e| err(no, e.to_string()))?;
            if table.insert(e).is_some() {
                return Err(err(no, format!("duplicate entry for n={} k={}", e.n, e.k)));
            }
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    /// Loads a table; a fingerprint from another machine only logs a warning.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let table = Self::parse(&fs::read_to_string(path)?, path)?;
        let host = host_fingerprint(crate::workers());
        if table.fingerprint != host {
            log::warn!(
                "dispatch table {} was profiled on {:?}, this host is {:?}; inflection points may be off",
                path.display(),
                table.fingerprint,
                host
            );
        }
        Ok(table)
    }
}

/// Identifies the profiling environment: architecture, OS, worker count and
/// CPU model when available.
pub fn host_fingerprint(workers: usize) -> String {
    let cpu = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.split_whitespace().collect::<Vec<_>>().join("_"))
        })
        .unwrap_or_else(|| "unknown-cpu".into());
    format!("{}-{} workers={} cpu={}", std::env::consts::ARCH, std::env::consts::OS, workers, cpu)
}

/// Kernel for an `[m x k] * [k x n]` product according to `table`.
pub fn dispatch(m: usize, n: usize, k: usize, table: &DispatchTable) -> Result<KernelChoice> {
    table.get(n, k).map(|e| e.choose(m)).ok_or(Error::UnknownShape { n, k })
}

/// Looks up and runs the dispatched kernel.
pub fn dispatched_gemm(
    a: &Matrix,
    b: &Matrix,
    table: &DispatchTable,
    workers: usize,
) -> Result<(Matrix, KernelChoice)> {
    let choice = dispatch(a.rows(), b.cols(), a.cols(), table)?;
    Ok((choice.run(a, b, workers)?, choice))
}
