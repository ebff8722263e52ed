//! Snapshot files and dataset manifests.
//!
//! Snapshot files use a fixed binary layout:
//!
//! ```text
//! magic   7 bytes   "ROMDAT1"
//! C,H,W,T u32 LE    channels, latitude rows, longitude columns, steps
//! names   C times   u32 LE length, then that many ASCII bytes
//! lat     H f64 LE  degrees
//! lon     W f64 LE  degrees
//! values  T*C*H*W   f64 LE, time-major then channel-major
//! ```
//!
//! The time axis is implicit: snapshot `k` sits at `k` times the default
//! cadence. Writing then reading a file reproduces every byte; readers
//! reject bad magic, truncation, and trailing garbage with errors that
//! name the failure.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write as _};
use std::path::Path;

use super::{DatasetDescriptor, GridSnapshot, DEFAULT_TIME_STEP_HOURS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 7] = b"ROMDAT1";

/// Longest accepted variable name; anything longer indicates a corrupt
/// header rather than a real name.
const MAX_NAME_LEN: u32 = 256;

/// Cap on total payload elements (half a billion f64s, 4 GiB) so corrupt
/// extents fail cleanly instead of attempting absurd allocations.
const MAX_ELEMENTS: u64 = 1 << 29;

// ───────────────────────── reading ─────────────────────────

struct Reader<R> {
    inner: R,
    /// What the reader is in the middle of, for truncation messages.
    context: &'static str,
}

impl<R: Read> Reader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::Data(format!("snapshot file truncated while reading {}", self.context))
            } else {
                Error::Io(e)
            }
        })
    }

    fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        self.fill(&mut bytes)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Reads a snapshot file back into a descriptor and its time-ordered
/// snapshots. Timestamps are assigned on the default cadence.
pub fn read_snapshots(path: &Path) -> Result<(DatasetDescriptor, Vec<GridSnapshot>)> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open snapshot file {}: {}", path.display(), e)))?;
    let mut reader = Reader { inner: BufReader::new(file), context: "magic" };

    let mut magic = [0u8; 7];
    reader.fill(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "bad magic in {}: expected ROMDAT1, found {:?}",
            path.display(),
            String::from_utf8_lossy(&magic)
        )));
    }

    reader.context = "header extents";
    let c = reader.u32()? as usize;
    let h = reader.u32()? as usize;
    let w = reader.u32()? as usize;
    let t = reader.u32()? as usize;
    if c == 0 || h == 0 || w == 0 || t == 0 {
        return Err(Error::Data(format!(
            "header declares empty extents {}x{}x{}x{} in {}",
            t,
            c,
            h,
            w,
            path.display()
        )));
    }
    let total = (t as u64)
        .checked_mul(c as u64)
        .and_then(|x| x.checked_mul(h as u64))
        .and_then(|x| x.checked_mul(w as u64))
        .filter(|&x| x <= MAX_ELEMENTS)
        .ok_or_else(|| {
            Error::Data(format!("header extents overflow a sane payload in {}", path.display()))
        })?;

    reader.context = "variable names";
    let mut variables = Vec::with_capacity(c);
    for _ in 0..c {
        let len = reader.u32()?;
        if len == 0 || len > MAX_NAME_LEN {
            return Err(Error::Data(format!(
                "variable name length {} is corrupt in {}",
                len,
                path.display()
            )));
        }
        let mut bytes = vec![0u8; len as usize];
        reader.fill(&mut bytes)?;
        let name = String::from_utf8(bytes)
            .map_err(|_| Error::Data(format!("variable name is not ASCII in {}", path.display())))?;
        if !name.is_ascii() {
            return Err(Error::Data(format!("variable name is not ASCII in {}", path.display())));
        }
        variables.push(name);
    }

    reader.context = "latitude grid";
    let lat = reader.f64_vec(h)?;
    reader.context = "longitude grid";
    let lon = reader.f64_vec(w)?;
    let descriptor = DatasetDescriptor::new(variables, lat, lon, DEFAULT_TIME_STEP_HOURS)?;

    reader.context = "field values";
    let plane = c * h * w;
    debug_assert_eq!(total, (t * plane) as u64);
    let mut snapshots = Vec::with_capacity(t);
    for k in 0..t {
        let values = reader.f64_vec(plane)?;
        snapshots.push(GridSnapshot::new(
            k as f64 * DEFAULT_TIME_STEP_HOURS,
            Tensor::new(&[c, h, w], values)?,
        )?);
    }

    let mut probe = [0u8; 1];
    match reader.inner.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Data(format!(
                "trailing bytes after the declared {} snapshots in {}",
                t,
                path.display()
            )))
        }
        Err(e) => return Err(Error::Io(e)),
    }
    Ok((descriptor, snapshots))
}

// ───────────────────────── writing ─────────────────────────

/// Writes snapshots in the documented layout. Every snapshot must match
/// the descriptor's grid.
pub fn write_snapshots(
    path: &Path,
    descriptor: &DatasetDescriptor,
    snapshots: &[GridSnapshot],
) -> Result<()> {
    if snapshots.is_empty() {
        return Err(Error::Data("refusing to write an empty snapshot file".into()));
    }
    let [c, h, w] = descriptor.field_shape();
    for (k, snap) in snapshots.iter().enumerate() {
        if snap.values().shape() != [c, h, w] {
            return Err(Error::shape(
                "write_snapshots",
                format!(
                    "snapshot {} has shape {:?}, descriptor says [{}, {}, {}]",
                    k,
                    snap.values().shape(),
                    c,
                    h,
                    w
                ),
            ));
        }
    }
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(MAGIC)?;
    for extent in [c, h, w, snapshots.len()] {
        let as32 = u32::try_from(extent)
            .map_err(|_| Error::Data(format!("extent {} exceeds the u32 header field", extent)))?;
        out.write_all(&as32.to_le_bytes())?;
    }
    for name in descriptor.variables() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
    }
    for &v in descriptor.lat() {
        out.write_all(&v.to_le_bytes())?;
    }
    for &v in descriptor.lon() {
        out.write_all(&v.to_le_bytes())?;
    }
    for snap in snapshots {
        for &v in snap.values().data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

// ───────────────────────── manifests ─────────────────────────

/// One line of a dataset manifest: a snapshot file and its time range.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub start_hours: f64,
    pub end_hours: f64,
    pub snapshots: usize,
}

/// Writes a CSV manifest (`path,start_hours,end_hours,snapshots`).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "path,start_hours,end_hours,snapshots")?;
    for e in entries {
        if e.path.contains(',') || e.path.contains('\n') {
            return Err(Error::Data(format!(
                "manifest path {:?} contains a delimiter",
                e.path
            )));
        }
        writeln!(out, "{},{},{},{}", e.path, e.start_hours, e.end_hours, e.snapshots)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a manifest written by [`write_manifest`].
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {}", path.display(), e)))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("path,start_hours,end_hours,snapshots") => {}
        other => {
            return Err(Error::Data(format!(
                "manifest {} has a bad header line: {:?}",
                path.display(),
                other
            )))
        }
    }
    lines
        .enumerate()
        .filter(|(_, line)| !line.is_empty())
        .map(|(idx, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!(
                    "manifest line {} has {} fields, expected 4",
                    idx + 2,
                    fields.len()
                )));
            }
            let parse_f64 = |s: &str, what: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::Data(format!("manifest line {}: bad {} {:?}", idx + 2, what, s))
                })
            };
            Ok(ManifestEntry {
                path: fields[0].to_string(),
                start_hours: parse_f64(fields[1], "start time")?,
                end_hours: parse_f64(fields[2], "end time")?,
                snapshots: fields[3].parse().map_err(|_| {
                    Error::Data(format!("manifest line {}: bad count {:?}", idx + 2, fields[3]))
                })?,
            })
        })
        .collect()
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn sample() -> (DatasetDescriptor, Vec<GridSnapshot>) {
        synth_generate(&SynthConfig::new(9, 12, 5, 77)).unwrap()
    }

    #[test]
    fn write_read_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.romdat");
        let (descriptor, snapshots) = sample();
        write_snapshots(&path, &descriptor, &snapshots).unwrap();
        let first = std::fs::read(&path).unwrap();

        let (back_desc, back) = read_snapshots(&path).unwrap();
        assert_eq!(back_desc.variables(), descriptor.variables());
        assert_eq!(back_desc.lat(), descriptor.lat());
        assert_eq!(back_desc.lon(), descriptor.lon());
        assert_eq!(back.len(), snapshots.len());
        for (a, b) in back.iter().zip(&snapshots) {
            assert!(a
                .values()
                .data()
                .iter()
                .zip(b.values().data())
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }

        // Writing what was read reproduces the bytes exactly.
        let path2 = dir.path().join("sample2.romdat");
        write_snapshots(&path2, &back_desc, &back).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn corrupt_magic_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.romdat");
        let (descriptor, snapshots) = sample();
        write_snapshots(&path, &descriptor, &snapshots).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = read_snapshots(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{}", err);
    }

    #[test]
    fn truncated_payload_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.romdat");
        let (descriptor, snapshots) = sample();
        write_snapshots(&path, &descriptor, &snapshots).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = read_snapshots(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{}", err);
        assert!(err.to_string().contains("field values"), "{}", err);
    }

    #[test]
    fn header_payload_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("miscount.romdat");
        let (descriptor, snapshots) = sample();
        write_snapshots(&path, &descriptor, &snapshots).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // The T field is the fourth u32 after the 7-byte magic.
        let t_at = 7 + 12;
        let declared = u32::from_le_bytes(bytes[t_at..t_at + 4].try_into().unwrap());
        assert_eq!(declared, 5);

        // Declare more snapshots than the payload holds.
        bytes[t_at..t_at + 4].copy_from_slice(&6u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_snapshots(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{}", err);

        // Declare fewer: the leftover payload is trailing garbage.
        bytes[t_at..t_at + 4].copy_from_slice(&4u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_snapshots(&path).unwrap_err();
        assert!(err.to_string().contains("trailing bytes"), "{}", err);
    }

    #[test]
    fn corrupt_name_length_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("badname.romdat");
        let (descriptor, snapshots) = sample();
        write_snapshots(&path, &descriptor, &snapshots).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // First name length sits right after magic + 4 extents.
        let at = 7 + 16;
        bytes[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_snapshots(&path).unwrap_err();
        assert!(err.to_string().contains("name length"), "{}", err);
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let err = read_snapshots(Path::new("/nonexistent/nowhere.romdat")).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.csv");
        let entries = vec![
            ManifestEntry {
                path: "a.romdat".into(),
                start_hours: 0.0,
                end_hours: 114.0,
                snapshots: 20,
            },
            ManifestEntry {
                path: "b.romdat".into(),
                start_hours: 120.0,
                end_hours: 594.0,
                snapshots: 80,
            },
        ];
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn manifest_with_bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.csv");
        std::fs::write(&path, "nope\n1,2,3,4\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
