//! Byte retrieval for sample URIs.

use std::io::Read;
use std::net::ToSocketAddrs;
use std::time::Duration;

use url::Url;

/// Transport settings shared by every fetch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchConfig {
    pub timeout: Duration,
    /// Retries after the first failed attempt.
    pub retries: u32,
    /// Maps `s3://bucket/key` onto an HTTP(S) URL. `{bucket}` and `{key}` are
    /// substituted, e.g. `https://{bucket}.s3.amazonaws.com/{key}`.
    pub s3_gateway_template: Option<String>,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            retries: 1,
            s3_gateway_template: None,
        }
    }
}

/// Something that can produce the bytes behind a URI.
pub trait RemoteSource: Send + Sync {
    fn fetch(&self, uri: &Url) -> Result<Vec<u8>, String>;
}

/// Handles `file`, `http`, `https`, `ftp` and gateway-mapped `s3` URIs.
pub struct UriFetcher {
    config: FetchConfig,
    agent: ureq::Agent,
}

impl UriFetcher {
    pub fn new(config: FetchConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }

    fn fetch_once(&self, uri: &Url) -> Result<Vec<u8>, String> {
        match uri.scheme() {
            "file" => {
                let path = uri
                    .to_file_path()
                    .map_err(|_| format!("not a local path: {uri}"))?;
                std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))
            }
            "http" | "https" => self.fetch_http(uri.as_str()),
            "ftp" => fetch_ftp(uri, self.config.timeout),
            "s3" => {
                let mapped = self.map_s3(uri)?;
                self.fetch_http(&mapped)
            }
            other => Err(format!("unsupported scheme {other}")),
        }
    }

    fn fetch_http(&self, url: &str) -> Result<Vec<u8>, String> {
        let mut resp = self.agent.get(url).call().map_err(|e| e.to_string())?;
        resp.body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(|e| e.to_string())
    }

    pub fn map_s3(&self, uri: &Url) -> Result<String, String> {
        let template = self
            .config
            .s3_gateway_template
            .as_deref()
            .ok_or_else(|| format!("no s3 gateway configured for {uri}"))?;
        let bucket = uri.host_str().ok_or_else(|| format!("s3 uri without bucket: {uri}"))?;
        let key = uri.path().trim_start_matches('/');
        Ok(template.replace("{bucket}", bucket).replace("{key}", key))
    }
}

impl RemoteSource for UriFetcher {
    fn fetch(&self, uri: &Url) -> Result<Vec<u8>, String> {
        let mut last = String::new();
        for _ in 0..=self.config.retries {
            match self.fetch_once(uri) {
                Ok(bytes) => return Ok(bytes),
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

fn fetch_ftp(uri: &Url, timeout: Duration) -> Result<Vec<u8>, String> {
    use suppaftp::types::FileType;
    use suppaftp::FtpStream;

    let host = uri.host_str().ok_or("ftp uri without host")?;
    let port = uri.port().unwrap_or(21);
    let addr = (host, port)
        .to_socket_addrs()
        .map_err(|e| e.to_string())?
        .next()
        .ok_or_else(|| format!("cannot resolve {host}"))?;
    let mut ftp = FtpStream::connect_timeout(addr, timeout).map_err(|e| e.to_string())?;
    let user = if uri.username().is_empty() {
        "anonymous"
    } else {
        uri.username()
    };
    let password = uri.password().unwrap_or("anonymous@");
    ftp.login(user, password).map_err(|e| e.to_string())?;
    ftp.transfer_type(FileType::Image).map_err(|e| e.to_string())?;
    let path = percent_decode(uri.path());
    let mut cursor = ftp.retr_as_buffer(&path).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    cursor.read_to_end(&mut out).map_err(|e| e.to_string())?;
    let _ = ftp.quit();
    Ok(out)
}

fn percent_decode(s: &str) -> String {
    percent_encoding::percent_decode_str(s)
        .decode_utf8_lossy()
        .into_owned()
}
