//! Shared helpers for the binary checkpoint formats. Each format is a
//! short ASCII magic, fixed-width little-endian integers, then 64-bit
//! little-endian floats. Readers reject wrong magic, truncation, and
//! trailing bytes with errors naming the failure and the file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct BinReader {
    inner: BufReader<File>,
    path: String,
    /// What is currently being read, for truncation messages.
    pub context: &'static str,
}

impl BinReader {
    pub fn open(path: &Path, magic: &[u8], format_name: &str) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            Error::Data(format!("cannot open {} file {}: {}", format_name, path.display(), e))
        })?;
        let mut reader =
            Self { inner: BufReader::new(file), path: path.display().to_string(), context: "magic" };
        let mut found = vec![0u8; magic.len()];
        reader.fill(&mut found)?;
        if found != magic {
            return Err(Error::Data(format!(
                "bad magic in {}: expected {}, found {:?}",
                reader.path,
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&found)
            )));
        }
        Ok(reader)
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::Data(format!("{} truncated while reading {}", self.path, self.context))
            } else {
                Error::Io(e)
            }
        })
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        self.fill(&mut bytes)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    /// Asserts end of file; anything left over is trailing garbage.
    pub fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Data(format!("trailing bytes after the payload in {}", self.path))),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

pub(crate) struct BinWriter {
    inner: BufWriter<File>,
}

impl BinWriter {
    pub fn create(path: &Path, magic: &[u8]) -> Result<Self> {
        let mut writer = Self { inner: BufWriter::new(File::create(path)?) };
        writer.inner.write_all(magic)?;
        Ok(writer)
    }

    pub fn u32(&mut self, v: usize) -> Result<()> {
        let as32 = u32::try_from(v)
            .map_err(|_| Error::Data(format!("extent {} exceeds the u32 header field", v)))?;
        self.inner.write_all(&as32.to_le_bytes())?;
        Ok(())
    }

    pub fn f64_slice(&mut self, vs: &[f64]) -> Result<()> {
        for &v in vs {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
