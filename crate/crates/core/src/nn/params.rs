use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CtdnError, Result};
use crate::tensor::Mat;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

pub const ARCHIVE_MAGIC: &[u8; 8] = b"CTDNARC\0";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter arrays of one model.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Arc<Mat>>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// Deep copy with a fresh identity, so graphs never confuse the copies.
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| Arc::new((**v).clone()))
                .collect(),
            frozen: self.frozen.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            frozen: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.frozen.push(false);
        ParamId(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = false);
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Graph leaf for a parameter; tracked unless frozen.
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param_leaf(
            self.uid,
            id.0,
            Arc::clone(&self.values[id.0]),
            !self.frozen[id.0],
        )
    }

    /// Graph leaf that never receives gradient, whatever the frozen flag.
    pub fn const_var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param_leaf(
            self.uid ^ (1 << 63),
            id.0,
            Arc::clone(&self.values[id.0]),
            false,
        )
    }

    /// Copies every parameter of `src` whose name starts with `from`,
    /// renamed to start with `to`. Returns how many were copied.
    pub fn copy_prefixed(&mut self, src: &ParamStore, from: &str, to: &str) -> Result<usize> {
        let mut n = 0;
        for (i, name) in src.names.iter().enumerate() {
            if let Some(rest) = name.strip_prefix(from) {
                let target = format!("{to}{rest}");
                let id = self.id_of(&target).ok_or_else(|| {
                    CtdnError::MissingCheckpoint(format!("no parameter {target}"))
                })?;
                if self.get(id).shape() != src.values[i].shape() {
                    return Err(CtdnError::dims(format!("shape of {target}")));
                }
                *self.get_mut(id) = (*src.values[i]).clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// Bitwise fingerprint of every value.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            name.hash(&mut h);
            for x in v.data() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f32 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f32::max)
    }

    pub fn to_archive(&self, seed: u64, meta: BTreeMap<String, String>) -> Archive {
        Archive {
            version: ARCHIVE_VERSION,
            seed,
            meta,
            arrays: self
                .names
                .iter()
                .zip(&self.values)
                .zip(&self.frozen)
                .map(|((n, v), &f)| NamedArray {
                    name: n.clone(),
                    frozen: f,
                    value: (**v).clone(),
                })
                .collect(),
        }
    }

    /// Overwrites values (and frozen flags) from an archive whose names
    /// match this store exactly.
    pub fn load_archive(&mut self, archive: &Archive) -> Result<()> {
        for a in &archive.arrays {
            let Some(id) = self.id_of(&a.name) else {
                continue;
            };
            if self.get(id).shape() != a.value.shape() {
                return Err(CtdnError::dims(format!(
                    "checkpoint array {} has shape {:?}, model expects {:?}",
                    a.name,
                    a.value.shape(),
                    self.get(id).shape()
                )));
            }
            *self.get_mut(id) = a.value.clone();
            self.frozen[id.0] = a.frozen;
        }
        for name in &self.names {
            if !archive.arrays.iter().any(|a| &a.name == name) {
                return Err(CtdnError::MissingCheckpoint(format!(
                    "archive lacks parameter {name}"
                )));
            }
        }
        Ok(())
    }
}

/// Xavier-uniform initialised `fan_in × fan_out` matrix.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
    Mat::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-a..a))
}

pub fn small_uniform(rng: &mut impl Rng, rows: usize, cols: usize, a: f32) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub frozen: bool,
    pub value: Mat,
}

/// Single-file container of named arrays plus format version, init seed and
/// free-form string metadata.
///
/// Layout (little endian): magic `CTDNARC\0`, `u32` version, `u64` seed,
/// `u32` meta count, meta `(str key, str value)*`, `u32` array count, arrays
/// `(str name, u8 frozen, u32 rows, u32 cols, f32 data*)*`. Strings are a
/// `u32` byte length followed by UTF-8 bytes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub version: u32,
    pub seed: u64,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .map(|a| &a.value)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.push(a.frozen as u8);
            out.extend_from_slice(&(a.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(a.value.cols() as u32).to_le_bytes());
            for x in a.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != ARCHIVE_MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let n = r.u32()?;
        let mut arrays = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.string()?;
            let frozen = r.take(1)?[0] != 0;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray {
                name,
                frozen,
                value: Mat::from_vec(rows, cols, data)?,
            });
        }
        Ok(Archive {
            version,
            seed,
            meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CtdnError::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| CtdnError::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| CtdnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CtdnError::MissingCheckpoint(path.display().to_string())
            } else {
                CtdnError::io(path, e)
            }
        })?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)
            .map_err(|e| CtdnError::io(path, e))?;
        Archive::from_bytes(&buf, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> CtdnError {
        CtdnError::Format {
            path: self.path.to_path_buf(),
            msg: format!("{msg} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("truncated archive"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }
}
