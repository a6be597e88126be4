//! Synthetic sample pools for tests, benchmarks and demos.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use url::Url;

/// Writes `n` small binary files under `dir` and returns their `file://` URIs.
///
/// Each payload draws bytes from its own skewed distribution, so byte
/// histograms (and hence model outputs) differ between samples.
pub fn write_pool(dir: &Path, n: usize, seed: u64) -> std::io::Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let dir = dir.canonicalize()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uris = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.random_range(64..512);
        let centre: u8 = rng.random();
        let spread: u8 = rng.random_range(1..=255);
        let bytes: Vec<u8> = (0..len)
            .map(|_| centre.wrapping_add(rng.random_range(0..spread)))
            .collect();
        let path = dir.join(format!("sample_{i:06}.bin"));
        std::fs::write(&path, bytes)?;
        let uri = Url::from_file_path(&path)
            .map_err(|_| std::io::Error::other(format!("not an absolute path: {}", path.display())))?;
        uris.push(uri.to_string());
    }
    Ok(uris)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_distinct_readable_files() {
        let dir = tempfile::tempdir().unwrap();
        let uris = write_pool(dir.path(), 20, 7).unwrap();
        assert_eq!(uris.len(), 20);
        let payloads: std::collections::HashSet<Vec<u8>> = uris
            .iter()
            .map(|u| std::fs::read(Url::parse(u).unwrap().to_file_path().unwrap()).unwrap())
            .collect();
        assert_eq!(payloads.len(), 20);
        assert_eq!(write_pool(&dir.path().join("again"), 20, 7).unwrap().len(), 20);
    }
}
