use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ClassLabel;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Relative to the manifest root unless absolute.
    pub image_path: PathBuf,
    pub label: ClassLabel,
    pub mask_path: Option<PathBuf>,
}

/// CSV list of images (`path,label,mask_path`) rooted at the directory that
/// holds the manifest file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: PathBuf, records: Vec<ManifestRecord>) -> Self {
        Self { root, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.label.index()] += 1;
        }
        c
    }

    pub fn has_masks(&self) -> bool {
        self.records.iter().all(|r| r.mask_path.is_some())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::format(format!("manifest: {e}")))?.clone();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::format(format!("manifest lacks a `{name}` column")))
        };
        let (pc, lc) = (col("path")?, col("label")?);
        let mc = header.iter().position(|h| h == "mask_path");
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::format(format!("manifest row {}: {e}", line + 2)))?;
            let field = |i: usize| row.get(i).unwrap_or("");
            if field(pc).is_empty() {
                return Err(Error::format(format!("manifest row {} has an empty path", line + 2)));
            }
            records.push(ManifestRecord {
                image_path: PathBuf::from(field(pc)),
                label: field(lc).parse()?,
                mask_path: mc.map(field).filter(|m| !m.is_empty()).map(PathBuf::from),
            });
        }
        Ok(Self { root, records })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::format(format!("manifest: {e}"));
        w.write_record(["path", "label", "mask_path"]).map_err(err)?;
        for r in &self.records {
            let mask = r.mask_path.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
            w.write_record([r.image_path.to_string_lossy().as_ref(), r.label.name(), mask.as_str()])
                .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(format!("manifest: {e}")))?;
        Ok(String::from_utf8(bytes).expect("UTF-8 paths"))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over every referenced file, in manifest order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for r in &self.records {
            for p in std::iter::once(&r.image_path).chain(r.mask_path.as_ref()) {
                let full = self.resolve(p);
                let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
