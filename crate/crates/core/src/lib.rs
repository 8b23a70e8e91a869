//! Power side-channel assisted extraction of a binary-activation MLP and
//! FGSM transferability evaluation.

pub mod attack;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod extraction;
pub mod network;
pub mod numerics;
pub mod power;
pub mod report;

use std::io::Write;
use std::path::Path;

pub use error::{Error, Result};
pub use network::{MlpModel, Shape};
pub use numerics::SeededRng;

/// Writes `bytes` to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let res = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
