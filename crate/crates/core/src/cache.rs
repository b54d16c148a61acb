//! Binary cache containers for precomputed artifacts.
//!
//! Layout: an 8-byte magic, a length-prefixed UTF-8 header of `key=value`
//! lines, then a little-endian f64 payload compressed with a signed-block
//! run-length scheme (documented in the header under `rle=`):
//!
//! * a record starts with an `i32` count `n`;
//! * `n > 0`: `n` literal f64 values follow;
//! * `n < 0`: one f64 value follows, repeated `-n` times.
//!
//! Zero runs from sparse tensors compress to 12 bytes per run; dense data
//! costs 8 bytes per value plus one count per block.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC_WEIGHT_TENSOR: &[u8; 8] = b"GCGPWT01";
pub const MAGIC_PATCH_MATRIX: &[u8; 8] = b"GCGPPM01";
pub const MAGIC_GEODESIC_TABLES: &[u8; 8] = b"GCGPGT01";
pub const MAGIC_MODEL: &[u8; 8] = b"GCGPMD01";

const RLE_TAG: &str = "signed-block-v1";
/// Minimum run length worth encoding as a repeat record.
const MIN_RUN: usize = 4;
const MAX_BLOCK: usize = i32::MAX as usize;

/// Hex SHA-256 of a parameter description; cache headers carry this digest
/// so a stale file is detected instead of silently reused.
pub fn params_digest(description: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(description.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Ordered key/value header.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Header {
    entries: BTreeMap<String, String>,
}

impl Header {
    pub fn new() -> Self {
        Header::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("header is missing '{key}'")))
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        self.require(key)?
            .parse()
            .map_err(|_| Error::Format(format!("header field '{key}' is not an integer")))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        self.require(key)?
            .parse()
            .map_err(|_| Error::Format(format!("header field '{key}' is not a number")))
    }

    fn encode(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    fn decode(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line '{line}'")))?;
            entries.insert(k.to_string(), v.to_string());
        }
        Ok(Header { entries })
    }
}

fn encode_payload(values: &[f64], w: &mut impl Write) -> Result<()> {
    let mut i = 0;
    while i < values.len() {
        // Measure the run starting here.
        let mut run = 1;
        while i + run < values.len()
            && values[i + run].to_bits() == values[i].to_bits()
            && run < MAX_BLOCK
        {
            run += 1;
        }
        if run >= MIN_RUN {
            w.write_all(&(-(run as i64) as i32).to_le_bytes())?;
            w.write_all(&values[i].to_le_bytes())?;
            i += run;
        } else {
            // Literal block: extend until the next encodable run (or end).
            let start = i;
            i += run;
            while i < values.len() && (i - start) < MAX_BLOCK {
                let mut next_run = 1;
                while i + next_run < values.len()
                    && values[i + next_run].to_bits() == values[i].to_bits()
                    && next_run < MIN_RUN
                {
                    next_run += 1;
                }
                if next_run >= MIN_RUN {
                    break;
                }
                i += next_run;
            }
            w.write_all(&((i - start) as i32).to_le_bytes())?;
            for v in &values[start..i] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn decode_payload(r: &mut impl Read, expected_len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(expected_len);
    let mut count_buf = [0u8; 4];
    let mut val_buf = [0u8; 8];
    while out.len() < expected_len {
        r.read_exact(&mut count_buf)?;
        let n = i32::from_le_bytes(count_buf);
        if n == 0 {
            return Err(Error::Format("zero-length payload block".into()));
        }
        if n < 0 {
            r.read_exact(&mut val_buf)?;
            let v = f64::from_le_bytes(val_buf);
            for _ in 0..(-(n as i64)) {
                out.push(v);
            }
        } else {
            for _ in 0..n {
                r.read_exact(&mut val_buf)?;
                out.push(f64::from_le_bytes(val_buf));
            }
        }
    }
    if out.len() != expected_len {
        return Err(Error::Format(format!(
            "payload decodes to {} values, expected {expected_len}",
            out.len()
        )));
    }
    Ok(out)
}

/// Writes a container; `payload_len` is recorded in the header so readers
/// can validate.
pub fn write_container(
    path: &Path,
    magic: &[u8; 8],
    mut header: Header,
    payload: &[f64],
) -> Result<()> {
    header.set("rle", RLE_TAG);
    header.set("payload_len", payload.len());
    let lock = LockFile::acquire(path)?;
    let result = (|| -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(magic)?;
        let text = header.encode();
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        encode_payload(payload, &mut w)?;
        w.flush()?;
        Ok(())
    })();
    drop(lock);
    result
}

/// Reads a container, checking the magic. A wrong or corrupted magic is a
/// stale-cache error so callers can suggest re-running preprocessing.
pub fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(Header, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut got = [0u8; 8];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::StaleCache(format!(
            "{} has magic {:?}, expected {:?}; delete it and re-run preprocessing",
            path.display(),
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf)?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    let mut text = vec![0u8; header_len];
    r.read_exact(&mut text)?;
    let header = Header::decode(
        std::str::from_utf8(&text).map_err(|_| Error::Format("header is not UTF-8".into()))?,
    )?;
    if header.get("rle") != Some(RLE_TAG) {
        return Err(Error::Format(format!(
            "unsupported payload encoding {:?}",
            header.get("rle")
        )));
    }
    let payload_len = header.require_usize("payload_len")?;
    let payload = decode_payload(&mut r, payload_len)?;
    Ok((header, payload))
}

/// Checks that a container exists and matches the expected digest without
/// decoding the payload. Used to skip up-to-date caches.
pub fn cache_is_current(path: &Path, magic: &[u8; 8], digest: &str) -> bool {
    let Ok(mut r) = File::open(path) else {
        return false;
    };
    let mut got = [0u8; 8];
    if r.read_exact(&mut got).is_err() || &got != magic {
        return false;
    }
    let mut len_buf = [0u8; 8];
    if r.read_exact(&mut len_buf).is_err() {
        return false;
    }
    let mut text = vec![0u8; u64::from_le_bytes(len_buf) as usize];
    if r.read_exact(&mut text).is_err() {
        return false;
    }
    let Ok(text) = std::str::from_utf8(&text) else {
        return false;
    };
    let Ok(header) = Header::decode(text) else {
        return false;
    };
    header.get("digest") == Some(digest)
}

/// Validates that an existing cache carries the expected digest, erroring
/// with instructions when it does not.
pub fn check_digest(path: &Path, header: &Header, expected: &str) -> Result<()> {
    let found = header.require("digest")?;
    if found != expected {
        return Err(Error::StaleCache(format!(
            "{} was built for a different configuration (digest {found} != {expected}); \
             delete the file or re-run `preprocess`",
            path.display()
        )));
    }
    Ok(())
}

fn parse_bin_layout(tag: &str) -> Result<crate::weighting::BinLayout> {
    use crate::weighting::BinLayout;
    let (kind, rest) = tag
        .split_once(':')
        .ok_or_else(|| Error::Format(format!("bad layout tag '{tag}'")))?;
    let field = |name: &str| -> Result<usize> {
        rest.split(',')
            .find_map(|kv| kv.strip_prefix(&format!("{name}=")))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("layout tag '{tag}' is missing {name}")))
    };
    match kind {
        "polar-radial-major" => Ok(BinLayout::PolarRadialMajor {
            num_angular: field("J")?,
            num_radial: field("K")?,
        }),
        "monet" => Ok(BinLayout::MoNet {
            num_bins: field("J")?,
        }),
        "box-offsets" => Ok(BinLayout::BoxOffsets { m: field("m")? }),
        other => Err(Error::Format(format!("unknown layout kind '{other}'"))),
    }
}

/// Saves a weight tensor in dense `(b, i, v)` row-major order (the RLE
/// layer compresses the sparse zeros).
pub fn save_weight_tensor(
    path: &Path,
    u: &crate::weighting::WeightTensor,
    digest: &str,
) -> Result<()> {
    let dense = u.to_dense();
    let mut header = Header::new();
    header
        .set("layout", u.layout().tag())
        .set("num_vertices", u.num_vertices())
        .set("num_bins", u.num_bins())
        .set("digest", digest);
    let payload: Vec<f64> = dense.iter().cloned().collect();
    write_container(path, MAGIC_WEIGHT_TENSOR, header, &payload)
}

pub fn load_weight_tensor(path: &Path, digest: &str) -> Result<crate::weighting::WeightTensor> {
    let (header, payload) = read_container(path, MAGIC_WEIGHT_TENSOR)?;
    check_digest(path, &header, digest)?;
    let layout = parse_bin_layout(header.require("layout")?)?;
    let n = header.require_usize("num_vertices")?;
    let nb = header.require_usize("num_bins")?;
    if payload.len() != nb * n * n {
        return Err(Error::Format(format!(
            "weight tensor payload has {} values, expected {}",
            payload.len(),
            nb * n * n
        )));
    }
    let dense = ndarray::Array3::from_shape_vec((nb, n, n), payload).expect("shape");
    crate::weighting::WeightTensor::from_dense(layout, &dense)
}

/// Saves a patch matrix (row-major).
pub fn save_patch_matrix(
    path: &Path,
    z: &crate::patch::PatchMatrix,
    digest: &str,
) -> Result<()> {
    let mut header = Header::new();
    header
        .set("layout", z.layout().bins.tag())
        .set("signal_dim", z.layout().signal_dim)
        .set("num_vertices", z.num_vertices())
        .set("patch_dim", z.patch_dim())
        .set("digest", digest);
    let payload: Vec<f64> = z.values().iter().cloned().collect();
    write_container(path, MAGIC_PATCH_MATRIX, header, &payload)
}

pub fn load_patch_matrix(path: &Path, digest: &str) -> Result<crate::patch::PatchMatrix> {
    let (header, payload) = read_container(path, MAGIC_PATCH_MATRIX)?;
    check_digest(path, &header, digest)?;
    let layout = crate::patch::PatchLayout {
        signal_dim: header.require_usize("signal_dim")?,
        bins: parse_bin_layout(header.require("layout")?)?,
    };
    let n = header.require_usize("num_vertices")?;
    let d = header.require_usize("patch_dim")?;
    if payload.len() != n * d {
        return Err(Error::Format(format!(
            "patch matrix payload has {} values, expected {}",
            payload.len(),
            n * d
        )));
    }
    let values = ndarray::Array2::from_shape_vec((n, d), payload).expect("shape");
    crate::patch::PatchMatrix::new(values, layout)
}

/// Saves geodesic tables: the rho matrix followed by the theta tensor.
pub fn save_geodesic_tables(
    path: &Path,
    tables: &crate::mesh::GeodesicTables,
    digest: &str,
) -> Result<()> {
    let n = tables.rho.nrows();
    let j = tables.theta.shape()[0];
    let mut header = Header::new();
    header
        .set("num_vertices", n)
        .set("num_angular", j)
        .set("max_rho_asymmetry", tables.max_rho_asymmetry)
        .set("fallback_seeds", tables.fallback_seeds)
        .set("digest", digest);
    let mut payload = Vec::with_capacity(n * n + j * n * n);
    payload.extend(tables.rho.iter());
    payload.extend(tables.theta.iter());
    write_container(path, MAGIC_GEODESIC_TABLES, header, &payload)
}

pub fn load_geodesic_tables(path: &Path, digest: &str) -> Result<crate::mesh::GeodesicTables> {
    let (header, payload) = read_container(path, MAGIC_GEODESIC_TABLES)?;
    check_digest(path, &header, digest)?;
    let n = header.require_usize("num_vertices")?;
    let j = header.require_usize("num_angular")?;
    if payload.len() != n * n + j * n * n {
        return Err(Error::Format(format!(
            "geodesic tables payload has {} values, expected {}",
            payload.len(),
            n * n + j * n * n
        )));
    }
    let rho = ndarray::Array2::from_shape_vec((n, n), payload[..n * n].to_vec()).expect("shape");
    let theta =
        ndarray::Array3::from_shape_vec((j, n, n), payload[n * n..].to_vec()).expect("shape");
    Ok(crate::mesh::GeodesicTables {
        rho,
        max_rho_asymmetry: header.require_f64("max_rho_asymmetry")?,
        theta,
        fallback_seeds: header.require_usize("fallback_seeds")?,
    })
}

/// Exclusive lock file guarding one cache path against concurrent writers.
pub struct LockFile {
    path: std::path::PathBuf,
}

impl LockFile {
    pub fn acquire(target: &Path) -> Result<Self> {
        let path = target.with_extension(format!(
            "{}.lock",
            target.extension().and_then(|e| e.to_str()).unwrap_or("cache")
        ));
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(LockFile { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::InvalidArgument(format!(
                    "cache {} is locked by another writer (remove {} if stale)",
                    target.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockFile {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_round_trip_mixed() {
        let mut values = vec![0.0; 100];
        values.extend([1.0, 2.0, 3.0]);
        values.extend(vec![5.5; 7]);
        values.extend((0..50).map(|i| i as f64 * 0.1));
        let mut buf = Vec::new();
        encode_payload(&values, &mut buf).unwrap();
        let decoded = decode_payload(&mut buf.as_slice(), values.len()).unwrap();
        assert_eq!(values, decoded);
        // The zero run compresses well below raw size.
        assert!(buf.len() < values.len() * 8);
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wt");
        let mut header = Header::new();
        header.set("J", 8).set("digest", params_digest("abc"));
        let payload: Vec<f64> = (0..64).map(|i| (i % 5) as f64).collect();
        write_container(&path, MAGIC_WEIGHT_TENSOR, header, &payload).unwrap();
        let (h, p) = read_container(&path, MAGIC_WEIGHT_TENSOR).unwrap();
        assert_eq!(h.require_usize("J").unwrap(), 8);
        assert_eq!(p, payload);
        assert!(cache_is_current(
            &path,
            MAGIC_WEIGHT_TENSOR,
            &params_digest("abc")
        ));
        assert!(!cache_is_current(
            &path,
            MAGIC_WEIGHT_TENSOR,
            &params_digest("other")
        ));
    }

    #[test]
    fn wrong_magic_is_stale_cache() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pm");
        write_container(&path, MAGIC_PATCH_MATRIX, Header::new(), &[1.0]).unwrap();
        let err = read_container(&path, MAGIC_WEIGHT_TENSOR).unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)));
    }

    #[test]
    fn digest_mismatch_reports_stale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gt");
        let mut header = Header::new();
        header.set("digest", params_digest("config-a"));
        write_container(&path, MAGIC_GEODESIC_TABLES, header, &[0.0]).unwrap();
        let (h, _) = read_container(&path, MAGIC_GEODESIC_TABLES).unwrap();
        assert!(check_digest(&path, &h, &params_digest("config-a")).is_ok());
        assert!(matches!(
            check_digest(&path, &h, &params_digest("config-b")),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn typed_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let digest = params_digest("typed");
        // Weight tensor.
        let coords = crate::weighting::image_grid_coords(3, 3).unwrap();
        let params =
            crate::weighting::PolarWeightParams::with_uniform_angles(2, vec![0.0, 1.0], 1.0)
                .unwrap();
        let u = crate::weighting::build_weight_tensor(
            &coords,
            &params,
            crate::weighting::WeightOptions::default(),
        )
        .unwrap();
        let p = dir.path().join("u.wt");
        save_weight_tensor(&p, &u, &digest).unwrap();
        assert_eq!(load_weight_tensor(&p, &digest).unwrap(), u);
        assert!(load_weight_tensor(&p, &params_digest("other")).is_err());
        // Patch matrix.
        let sig = crate::graph::Signal::from_column((0..9).map(|i| i as f64).collect()).unwrap();
        let z = crate::patch::build_patch_matrix(&sig, &u).unwrap();
        let p = dir.path().join("z.pm");
        save_patch_matrix(&p, &z, &digest).unwrap();
        assert_eq!(load_patch_matrix(&p, &digest).unwrap(), z);
        // Geodesic tables.
        let mesh = crate::mesh::planar_grid(4, 4, 1.0, 1.0).unwrap();
        let tables = crate::mesh::GeodesicTables::compute(&mesh, 3, 3.0).unwrap();
        let p = dir.path().join("t.gt");
        save_geodesic_tables(&p, &tables, &digest).unwrap();
        let loaded = load_geodesic_tables(&p, &digest).unwrap();
        assert_eq!(loaded.rho, tables.rho);
        assert_eq!(loaded.theta, tables.theta);
    }

    #[test]
    fn lock_file_excludes_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wt");
        let lock = LockFile::acquire(&path).unwrap();
        assert!(LockFile::acquire(&path).is_err());
        drop(lock);
        assert!(LockFile::acquire(&path).is_ok());
    }
}
