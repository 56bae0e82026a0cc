use std::collections::BTreeMap;
use std::path::Path;

use super::ProfilerError;
use crate::graph::NodeId;
use crate::ispm::{Codec, PackingPolicy, Precision};

pub const PROFILE_MAGIC: &[u8; 4] = b"OLPF";
pub const PROFILE_VERSION: u8 = 1;

/// Calibrated costs of one ⟨split, precision⟩ configuration, averaged over
/// the calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConfigProfile {
    /// Time to pack every dependency tensor of the cut.
    pub pack_ms: f64,
    /// Encoded size of all packed dependency records.
    pub dep_bytes: f64,
    /// Top-1 disagreement with full precision, in percentage points.
    pub acc_delta: f64,
}

/// Offline cost tables.
///
/// Persisted as little-endian binary: magic `"OLPF"`, version, model
/// digest, codec id, the two unit names, the per-unit layer time vectors,
/// the split and precision axes and the row-major entry grid. Every float
/// is stored as its f64 bit pattern so a load/save cycle is byte-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileDB {
    pub model_digest: [u8; 32],
    /// Codec used for quantized precisions; passthrough ships raw floats.
    pub codec: Codec,
    /// Milliseconds per node id, keyed by processing-unit tag.
    pub layer_ms: BTreeMap<String, Vec<f64>>,
    pub client_unit: String,
    pub server_unit: String,
    /// Ascending split ids.
    pub splits: Vec<NodeId>,
    pub precisions: Vec<Precision>,
    /// Row-major over `splits` x `precisions`.
    pub entries: Vec<ConfigProfile>,
}

/// Policy used on the wire for `precision`: quantized codes go through
/// `codec`, passthrough ships raw floats.
pub fn policy_for(precision: Precision, codec: Codec) -> PackingPolicy {
    match precision {
        Precision::Passthrough => PackingPolicy::passthrough(),
        Precision::Bits(_) => PackingPolicy::new(precision, codec),
    }
}

impl ProfileDB {
    pub fn policy(&self, precision: Precision) -> PackingPolicy {
        policy_for(precision, self.codec)
    }

    pub fn output_id(&self) -> NodeId {
        self.client_layers().len() - 1
    }

    pub fn client_layers(&self) -> &[f64] {
        &self.layer_ms[&self.client_unit]
    }

    pub fn server_layers(&self) -> &[f64] {
        &self.layer_ms[&self.server_unit]
    }

    /// Offline client time of nodes `0..=s`.
    pub fn prefix_ms(&self, split: NodeId) -> f64 {
        self.client_layers()[..=split].iter().sum()
    }

    /// Offline server time of nodes `s+1..=N`.
    pub fn suffix_ms(&self, split: NodeId) -> f64 {
        // An empty f64 sum is -0.0; `+ 0.0` normalizes it.
        self.server_layers()[split + 1..].iter().sum::<f64>() + 0.0
    }

    pub fn entry(&self, split: NodeId, precision: Precision) -> Result<&ConfigProfile, ProfilerError> {
        let missing = || ProfilerError::MissingEntry { split, precision };
        let si = self.splits.binary_search(&split).map_err(|_| missing())?;
        let pi = self.precisions.iter().position(|&p| p == precision).ok_or_else(missing)?;
        Ok(&self.entries[si * self.precisions.len() + pi])
    }

    /// All configurations in grid order.
    pub fn configs(&self) -> impl Iterator<Item = (NodeId, Precision, &ConfigProfile)> + '_ {
        let np = self.precisions.len();
        self.entries
            .iter()
            .enumerate()
            .map(move |(i, e)| (self.splits[i / np], self.precisions[i % np], e))
    }

    pub fn validate(&self) -> Result<(), ProfilerError> {
        let bad = |msg: String| Err(ProfilerError::Malformed(msg));
        for unit in [&self.client_unit, &self.server_unit] {
            if !self.layer_ms.contains_key(unit) {
                return bad(format!("no layer times for unit `{unit}`"));
            }
        }
        let n_nodes = self.client_layers().len();
        if n_nodes < 2 {
            return bad("fewer than two nodes".into());
        }
        for (unit, times) in &self.layer_ms {
            if times.len() != n_nodes {
                return bad(format!("unit `{unit}` has {} layer times, expected {n_nodes}", times.len()));
            }
            if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
                return bad(format!("unit `{unit}` has a negative or non-finite layer time"));
            }
        }
        if self.splits.is_empty() || self.precisions.is_empty() {
            return bad("empty configuration axis".into());
        }
        if self.splits.windows(2).any(|w| w[0] >= w[1]) || *self.splits.last().unwrap() >= n_nodes {
            return bad("splits must be ascending and within the graph".into());
        }
        for (i, p) in self.precisions.iter().enumerate() {
            if self.precisions[..i].contains(p) {
                return bad(format!("duplicate precision {p}"));
            }
        }
        if self.entries.len() != self.splits.len() * self.precisions.len() {
            return bad("entry grid does not match its axes".into());
        }
        let last = n_nodes - 1;
        for (s, p, e) in self.configs() {
            let values = [e.pack_ms, e.dep_bytes, e.acc_delta];
            if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!("entry ⟨{s}, {p}⟩ has a negative or non-finite value"));
            }
            if p == Precision::Passthrough && e.acc_delta != 0.0 {
                return bad(format!("passthrough entry at split {s} has non-zero accuracy delta"));
            }
            if s == last && e.dep_bytes != 0.0 {
                return bad("client-only split transmits dependencies".into());
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PROFILE_MAGIC);
        out.push(PROFILE_VERSION);
        out.extend_from_slice(&self.model_digest);
        out.push(self.codec.id());
        put_str(&mut out, &self.client_unit);
        put_str(&mut out, &self.server_unit);
        put_u32(&mut out, self.layer_ms.len());
        for (unit, times) in &self.layer_ms {
            put_str(&mut out, unit);
            put_u32(&mut out, times.len());
            times.iter().for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
        }
        put_u32(&mut out, self.splits.len());
        self.splits.iter().for_each(|&s| put_u32(&mut out, s));
        put_u32(&mut out, self.precisions.len());
        self.precisions.iter().for_each(|p| out.push(p.wire_id()));
        for e in &self.entries {
            for v in [e.pack_ms, e.dep_bytes, e.acc_delta] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, ProfilerError> {
        let mut r = Reader { buf, at: 0 };
        if r.take(4)? != PROFILE_MAGIC {
            return Err(ProfilerError::Malformed("bad magic".into()));
        }
        let version = r.u8()?;
        if version != PROFILE_VERSION {
            return Err(ProfilerError::Malformed(format!("unsupported version {version}")));
        }
        let model_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let codec = Codec::from_id(r.u8()?)?;
        let client_unit = r.string()?;
        let server_unit = r.string()?;
        let mut layer_ms = BTreeMap::new();
        for _ in 0..r.u32()? {
            let unit = r.string()?;
            let n = r.u32()?;
            let times = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            if layer_ms.insert(unit.clone(), times).is_some() {
                return Err(ProfilerError::Malformed(format!("duplicate unit `{unit}`")));
            }
        }
        let splits = (0..r.u32()?).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let precisions = (0..r.u32()?)
            .map(|_| Ok(Precision::from_wire(r.u8()?)?))
            .collect::<Result<Vec<_>, ProfilerError>>()?;
        let mut entries = Vec::with_capacity(splits.len() * precisions.len());
        for _ in 0..splits.len() * precisions.len() {
            entries.push(ConfigProfile {
                pack_ms: r.f64()?,
                dep_bytes: r.f64()?,
                acc_delta: r.f64()?,
            });
        }
        if r.at != buf.len() {
            return Err(ProfilerError::Malformed(format!("{} trailing bytes", buf.len() - r.at)));
        }
        let db = ProfileDB {
            model_digest,
            codec,
            layer_ms,
            client_unit,
            server_unit,
            splits,
            precisions,
            entries,
        };
        db.validate()?;
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProfilerError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| io_error(path, source))
    }

    pub fn load(path: &Path) -> Result<Self, ProfilerError> {
        let buf = std::fs::read(path).map_err(|source| io_error(path, source))?;
        Self::from_bytes(&buf)
    }
}

fn io_error(path: &Path, source: std::io::Error) -> ProfilerError {
    ProfilerError::Io { path: path.display().to_string(), source }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProfilerError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ProfilerError::Malformed("truncated profile".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProfilerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, ProfilerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64, ProfilerError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ProfilerError> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ProfilerError::Malformed("unit name is not UTF-8".into()))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Three-node toy profile: splits {0, 1, 2}, precisions {4, fp32}.
    pub(crate) fn toy() -> ProfileDB {
        let entry = |pack_ms, dep_bytes, acc_delta| ConfigProfile { pack_ms, dep_bytes, acc_delta };
        ProfileDB {
            model_digest: [7; 32],
            codec: Codec::Lz4,
            layer_ms: BTreeMap::from([
                ("cpu".to_string(), vec![0.0, 10.0, 30.0]),
                ("gpu".to_string(), vec![0.0, 2.0, 6.0]),
            ]),
            client_unit: "cpu".into(),
            server_unit: "gpu".into(),
            splits: vec![0, 1, 2],
            precisions: vec![Precision::Bits(4), Precision::Passthrough],
            entries: vec![
                entry(1.0, 500.0, 2.0),
                entry(0.2, 4000.0, 0.0),
                entry(1.5, 300.0, 1.0),
                entry(0.3, 8000.0, 0.0),
                entry(0.0, 0.0, 0.0),
                entry(0.0, 0.0, 0.0),
            ],
        }
    }

    #[test]
    fn prefix_and_suffix_sums() {
        let db = toy();
        db.validate().unwrap();
        assert_eq!(db.prefix_ms(1), 10.0);
        assert_eq!(db.prefix_ms(2), 40.0);
        assert_eq!(db.suffix_ms(0), 8.0);
        assert_eq!(db.suffix_ms(2), 0.0);
        assert_eq!(db.entry(1, Precision::Passthrough).unwrap().dep_bytes, 8000.0);
        assert!(matches!(
            db.entry(1, Precision::Bits(8)),
            Err(ProfilerError::MissingEntry { split: 1, .. })
        ));
    }

    #[test]
    fn persistence_is_byte_exact() {
        let db = toy();
        let bytes = db.to_bytes();
        let back = ProfileDB::from_bytes(&bytes).unwrap();
        assert_eq!(back, db);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corrupt_profiles() {
        let bytes = toy().to_bytes();
        assert!(ProfileDB::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ProfileDB::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(ProfileDB::from_bytes(&magic).is_err());

        let mut lossy = toy();
        lossy.entries[1].acc_delta = 0.5;
        assert!(lossy.validate().is_err());
        let mut sends = toy();
        sends.entries[4].dep_bytes = 1.0;
        assert!(sends.validate().is_err());
    }
}
