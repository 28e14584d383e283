use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

/// Deployment settings. Every field has an environment variable.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    /// `WHEELGEN_BIND` (address) and `WHEELGEN_PORT`. Localhost by default.
    pub addr: SocketAddr,
    /// `WHEELGEN_STORE`
    pub store: PathBuf,
    /// `WHEELGEN_BACKEND`; falls back to the loaded model, else the stub mixture.
    pub default_backend: Option<String>,
    /// `WHEELGEN_CANVAS`
    pub canvas: usize,
    /// `WHEELGEN_MODEL`: a trained mixture artifact to register.
    pub model: Option<PathBuf>,
    /// `WHEELGEN_WORKERS`
    pub workers: usize,
    /// `WHEELGEN_SEED_CORPUS`: wheels generated into an empty exemplar store.
    pub seed_corpus: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), 8080),
            store: PathBuf::from("wheelgen-store"),
            default_backend: None,
            canvas: 64,
            model: None,
            workers: 1,
            seed_corpus: 200,
        }
    }
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut c = Self::default();
        let get = |k: &str| get(k).filter(|v| !v.trim().is_empty());
        if let Some(v) = get("WHEELGEN_BIND") {
            let ip: IpAddr = v.parse().with_context(|| format!("WHEELGEN_BIND `{v}`"))?;
            c.addr.set_ip(ip);
        }
        if let Some(v) = get("WHEELGEN_PORT") {
            c.addr.set_port(v.parse().with_context(|| format!("WHEELGEN_PORT `{v}`"))?);
        }
        if let Some(v) = get("WHEELGEN_STORE") {
            c.store = PathBuf::from(v);
        }
        c.default_backend = get("WHEELGEN_BACKEND");
        if let Some(v) = get("WHEELGEN_CANVAS") {
            c.canvas = v.parse().with_context(|| format!("WHEELGEN_CANVAS `{v}`"))?;
        }
        c.model = get("WHEELGEN_MODEL").map(PathBuf::from);
        if let Some(v) = get("WHEELGEN_WORKERS") {
            c.workers = v.parse().with_context(|| format!("WHEELGEN_WORKERS `{v}`"))?;
        }
        if let Some(v) = get("WHEELGEN_SEED_CORPUS") {
            c.seed_corpus = v.parse().with_context(|| format!("WHEELGEN_SEED_CORPUS `{v}`"))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(8..=1024).contains(&self.canvas) {
            bail!("canvas {} outside 8..=1024", self.canvas);
        }
        if self.workers == 0 {
            bail!("need at least one worker");
        }
        Ok(())
    }
}
