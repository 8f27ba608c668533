//! Static site/topology lookup tables.
//!
//! Loaded once at ingester start from a JSON file and shared read-only.
//! Lookups never touch live DNS; a deployment that wants a live resolver
//! plugs one in by generating this file.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub site: String,
    pub vo: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SiteTopology {
    pub host_to_site: BTreeMap<String, SiteInfo>,
    pub ip_to_host: BTreeMap<String, String>,
    pub ip_to_asn: BTreeMap<String, u32>,
    pub ip_to_geo: BTreeMap<String, GeoPoint>,
    /// Derived inverse of `ip_to_host`; rebuilt on load.
    #[serde(skip)]
    host_to_ip: BTreeMap<String, String>,
}

impl SiteTopology {
    pub fn load(path: &Path) -> std::io::Result<SiteTopology> {
        let text = std::fs::read_to_string(path)?;
        let mut topo: SiteTopology = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        topo.rebuild_inverse();
        topo
            .validate()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(topo)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    pub fn rebuild_inverse(&mut self) {
        self.host_to_ip = self
            .ip_to_host
            .iter()
            .map(|(ip, host)| (host.clone(), ip.clone()))
            .collect();
    }

    fn validate(&self) -> Result<(), String> {
        for ip in self
            .ip_to_host
            .keys()
            .chain(self.ip_to_asn.keys())
            .chain(self.ip_to_geo.keys())
        {
            if ip.parse::<std::net::IpAddr>().is_err() {
                return Err(format!("not an IP address: {ip:?}"));
            }
        }
        Ok(())
    }

    pub fn host_for_ip(&self, ip: &str) -> Option<&str> {
        self.ip_to_host.get(ip).map(String::as_str)
    }

    pub fn ip_for_host(&self, host: &str) -> Option<&str> {
        self.host_to_ip.get(host).map(String::as_str)
    }

    pub fn site_for_host(&self, host: &str) -> Option<&SiteInfo> {
        self.host_to_site.get(host)
    }

    pub fn asn_for_ip(&self, ip: &str) -> Option<u32> {
        self.ip_to_asn.get(ip).copied()
    }

    pub fn geo_for_ip(&self, ip: &str) -> Option<GeoPoint> {
        self.ip_to_geo.get(ip).copied()
    }

    /// Insert a host/ip pair with its metadata. Used by the synthetic mesh
    /// builder and tests.
    pub fn add_host(&mut self, host: &str, ip: &str, site: &str, vo: &str) {
        self.host_to_site.insert(
            host.to_string(),
            SiteInfo {
                site: site.to_string(),
                vo: vo.to_string(),
            },
        );
        self.ip_to_host.insert(ip.to_string(), host.to_string());
        self.host_to_ip.insert(host.to_string(), ip.to_string());
    }
}

/// Strip exactly the leftmost DNS label: `wn01.cs.wisc.edu` -> `cs.wisc.edu`.
/// A bare single-label name is returned unchanged.
pub fn domain_of(hostname: &str) -> &str {
    match hostname.split_once('.') {
        Some((_, rest)) if !rest.is_empty() => rest,
        _ => hostname,
    }
}
