//! Dataset download with SHA-256 verification into the dataset cache.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{CliError, IoContext, Result};
use crate::manifest::sha256_hex;

#[derive(Debug, Clone)]
pub struct FetchRequest {
    pub url: String,
    /// File name in the cache; defaults to the last URL segment.
    pub name: Option<String>,
    /// Expected digest; when absent `<url>.sha256` is fetched instead.
    pub expect_sha256: Option<String>,
    pub dir: PathBuf,
}

/// `file://` URLs are read locally, anything else goes over HTTP(S).
fn get_bytes(url: &str) -> Result<Vec<u8>> {
    if let Some(path) = url.strip_prefix("file://") {
        return std::fs::read(path).at(path);
    }
    let response = ureq::get(url).call().map_err(|e| CliError::Download(format!("{url}: {e}")))?;
    let mut bytes = Vec::new();
    response
        .into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| CliError::Download(format!("{url}: {e}")))?;
    Ok(bytes)
}

fn parse_digest(text: &str, source: &str) -> Result<String> {
    let digest = text.split_whitespace().next().unwrap_or("").to_ascii_lowercase();
    if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(CliError::Download(format!("{source}: not a SHA-256 digest: {digest:?}")));
    }
    Ok(digest)
}

fn file_name(req: &FetchRequest) -> Result<String> {
    if let Some(name) = &req.name {
        return Ok(name.clone());
    }
    req.url
        .rsplit('/')
        .next()
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| CliError::Download(format!("{}: cannot infer a file name", req.url)))
}

/// Downloads `req.url` into `req.dir` unless a file with the expected digest
/// is already there. Nothing is written when verification fails.
pub fn fetch(req: &FetchRequest) -> Result<PathBuf> {
    let name = file_name(req)?;
    let expected = match &req.expect_sha256 {
        Some(d) => parse_digest(d, "--expect-sha256")?,
        None => {
            let sidecar = format!("{}.sha256", req.url);
            let text = get_bytes(&sidecar)?;
            parse_digest(&String::from_utf8_lossy(&text), &sidecar)?
        }
    };
    let dest = req.dir.join(&name);
    if dest.exists() && sha256_hex(&std::fs::read(&dest).at(&dest)?) == expected {
        log::info!("{} already present and verified", dest.display());
        return Ok(dest);
    }
    let bytes = get_bytes(&req.url)?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(CliError::Checksum { name, expected, actual });
    }
    write_atomic(&dest, &bytes)?;
    log::info!("wrote {} ({} bytes)", dest.display(), bytes.len());
    Ok(dest)
}

fn write_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    let dir = dest.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).at(dir)?;
    let tmp = dest.with_extension("partial");
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, dest).at(dest)
}
