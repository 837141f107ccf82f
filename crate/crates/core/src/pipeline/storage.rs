//! URI resolution and atomic local writes. Only the local file backend is
//! implemented.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::PipelineError;

fn scheme(uri: &str) -> Option<&str> {
    let (head, _) = uri.split_once(':')?;
    let mut chars = head.chars();
    let first = chars.next()?;
    // a single letter is a drive prefix, not a scheme
    if head.len() < 2 || !first.is_ascii_alphabetic() {
        return None;
    }
    chars
        .all(|c| c.is_ascii_alphanumeric() || "+-.".contains(c))
        .then_some(head)
}

/// Local path for a `file:` URI or a bare path; relative paths are taken
/// from `base`.
pub fn resolve_uri(uri: &str, base: &Path) -> Result<PathBuf, PipelineError> {
    let path = match scheme(uri) {
        Some(s) if s.eq_ignore_ascii_case("file") => {
            let rest = &uri[s.len() + 1..];
            let rest = rest.strip_prefix("//localhost").or_else(|| rest.strip_prefix("//")).unwrap_or(rest);
            if rest.is_empty() {
                return Err(PipelineError::Config(format!("empty path in {uri:?}")));
            }
            PathBuf::from(rest)
        }
        Some(s) => return Err(PipelineError::UnsupportedScheme(format!("{s}: in {uri:?}"))),
        None => PathBuf::from(uri),
    };
    Ok(if path.is_absolute() { path } else { base.join(path) })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, PipelineError> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::NotFound(path.display().to_string()),
        _ => PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        },
    })
}

pub fn read_text(path: &Path) -> Result<String, PipelineError> {
    String::from_utf8(read_bytes(path)?).map_err(|_| PipelineError::Data(format!("{} is not UTF-8", path.display())))
}

/// Files named by `uris`; a directory contributes its `*.csv` files in
/// name order.
pub fn expand_inputs(uris: &[String], base: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for uri in uris {
        let path = resolve_uri(uri, base)?;
        if path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&path)
                .map_err(|e| PipelineError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
                .collect();
            files.sort();
            out.extend(files);
        } else if path.is_file() {
            out.push(path);
        } else {
            return Err(PipelineError::NotFound(path.display().to_string()));
        }
    }
    Ok(out)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io_err = |e: std::io::Error| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}
