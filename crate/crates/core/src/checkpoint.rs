//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PLMA"            4 bytes magic
//! version           u32 (currently 1)
//! count             u32 number of entries
//! per entry, sorted by name:
//!   name_len        u32, then name_len bytes of UTF-8
//!   dtype           u8   (0 = f32, 1 = f64)
//!   rank            u32, then rank × u64 dims
//!   data            product(dims) × element, row-major
//! ```
//!
//! Parameters are written as f64, so a save/load round trip is bit-exact.
//! f32 entries are accepted on load and widened.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PLMA";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Header of one stored array, as reported by [`inspect`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntryInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl EntryInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let count = u32::try_from(store.len()).map_err(|_| Error::Checkpoint("too many entries".into()))?;
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u32::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DType::F64.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8], mut on_entry: impl FnMut(EntryInfo, &[u8]) -> Result<()>) -> Result<()> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a PLMA checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut prev: Option<String> = None;
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not UTF-8")))?
            .to_owned();
        if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(Error::Checkpoint(format!("entry `{name}` out of order or duplicated")));
        }
        let dtype = DType::from_tag(r.u8("dtype")?)?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint(format!("`{name}`: dimension {d} too large")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: size overflows")))?;
        let data = r.take(n, &format!("data of `{name}`"))?;
        on_entry(
            EntryInfo {
                name: name.clone(),
                dtype,
                shape,
            },
            data,
        )?;
        prev = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    parse(bytes, |info, raw| {
        let data = match info.dtype {
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        store.insert(info.name, Tensor::new(info.shape, data)?)
    })?;
    Ok(store)
}

/// Entry headers without materializing the arrays.
pub fn inspect_bytes(bytes: &[u8]) -> Result<Vec<EntryInfo>> {
    let mut out = Vec::new();
    parse(bytes, |info, _| {
        out.push(info);
        Ok(())
    })?;
    Ok(out)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = to_bytes(store)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn inspect(path: &Path) -> Result<Vec<EntryInfo>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    inspect_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn sample_store() -> ParamStore {
        let mut rng = stream(1, &[]);
        let mut s = ParamStore::new();
        s.insert("b.weight", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        s.insert("a.bias", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        s.insert("c.scalar", Tensor::scalar(f64::MIN_POSITIVE)).unwrap();
        s.insert("d.cube", Tensor::randn(&[2, 1, 3], 1.0, &mut rng)).unwrap();
        s.insert("e.special", Tensor::new(vec![3], vec![-0.0, f64::MAX, 5e-324]).unwrap()).unwrap();
        s
    }

    fn bits(s: &ParamStore) -> Vec<(String, Vec<usize>, Vec<u64>)> {
        s.iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample_store();
        let bytes = to_bytes(&s).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(bits(&s), bits(&back));
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn hand_built_layout() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut want = b"PLMA".to_vec();
        want.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0]);
        want.extend_from_slice(&[1, 0, 0, 0, b'w', 1, 1, 0, 0, 0]);
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(to_bytes(&s).unwrap(), want);
    }

    #[test]
    fn f32_entries_are_widened() {
        let mut bytes = b"PLMA".to_vec();
        bytes.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, b'x', 0, 2, 0, 0, 0]);
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-3.25f32).to_le_bytes());
        let s = from_bytes(&bytes).unwrap();
        assert_eq!(s.get("x").unwrap().shape(), &[1, 2]);
        assert_eq!(s.get("x").unwrap().data(), &[0.5, -3.25]);
        let info = inspect_bytes(&bytes).unwrap();
        assert_eq!(info[0].dtype, DType::F32);
        assert_eq!(info[0].len(), 2);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let good = to_bytes(&sample_store()).unwrap();
        for cut in [0, 3, 4, 11, 12, 20, good.len() - 1] {
            assert!(from_bytes(&good[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(from_bytes(&bad).is_err());
        let mut bad = good.clone();
        bad.push(0);
        assert!(from_bytes(&bad).is_err());
        // dtype byte of the first entry ("a.bias", 6 bytes of name)
        let mut bad = good.clone();
        bad[12 + 4 + 6] = 7;
        assert!(from_bytes(&bad).is_err());
    }

    #[test]
    fn duplicate_or_unsorted_names_rejected() {
        let entry = |name: &str| {
            let mut e = (name.len() as u32).to_le_bytes().to_vec();
            e.extend_from_slice(name.as_bytes());
            e.extend_from_slice(&[1, 0, 0, 0, 0]);
            e.extend_from_slice(&1.0f64.to_le_bytes());
            e
        };
        for names in [["a", "a"], ["b", "a"]] {
            let mut bytes = b"PLMA".to_vec();
            bytes.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0]);
            for n in names {
                bytes.extend(entry(n));
            }
            assert!(from_bytes(&bytes).is_err(), "{names:?}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.plma"), dir.path().join("b.plma"));
        let s = sample_store();
        save(&s, &p1).unwrap();
        save(&load(&p1).unwrap(), &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(inspect(&p1).unwrap().len(), 5);
        let err = load(&dir.path().join("missing.plma")).unwrap_err().to_string();
        assert!(err.contains("missing.plma"), "{err}");
    }

    proptest! {
        #[test]
        fn arbitrary_stores_round_trip(entries in prop::collection::btree_map(
            "[a-z.]{1,12}",
            (prop::collection::vec(1usize..4, 1..4), any::<u64>()),
            0..6,
        )) {
            let store: ParamStore = entries
                .into_iter()
                .map(|(k, (shape, seed))| {
                    let n: usize = shape.iter().product();
                    let mut x = seed;
                    let data = (0..n).map(|_| { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); f64::from_bits(x) }).collect();
                    (k, Tensor::new(shape, data).unwrap())
                })
                .collect();
            let bytes = to_bytes(&store).unwrap();
            let back = from_bytes(&bytes).unwrap();
            prop_assert_eq!(bits(&store), bits(&back));
            prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
        }
    }
}
