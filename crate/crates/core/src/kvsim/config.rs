use super::KvError;

/// HBM port geometry and the per-port cost parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HbmConfig {
    pub n_ports: usize,
    pub port_width_bits: u64,
    pub n_physical_channels: usize,
    /// Ports mapped to the same channel contend for it.
    pub port_to_channel: Vec<usize>,
    pub freq_mhz: f64,
    pub peak_bw_gbps: f64,
    pub burst_beats_max: u64,
    /// Fixed cost of opening a new burst.
    pub burst_setup_cycles: f64,
    pub page_size_bytes: u64,
    pub page_miss_penalty_cycles: f64,
    pub page_hit_cycles_per_beat: f64,
    /// Address space behind one port.
    pub port_capacity_bytes: u64,
}

/// Page-miss penalty frozen from the one-point dense calibration.
pub const CALIBRATED_PAGE_MISS_PENALTY: f64 = 8.05;

impl Default for HbmConfig {
    fn default() -> Self {
        HbmConfig {
            n_ports: 16,
            port_width_bits: 512,
            n_physical_channels: 8,
            port_to_channel: (0..16).map(|p| p / 2).collect(),
            freq_mhz: 450.0,
            peak_bw_gbps: 460.0,
            burst_beats_max: 64,
            burst_setup_cycles: 4.0,
            page_size_bytes: 8192,
            page_miss_penalty_cycles: CALIBRATED_PAGE_MISS_PENALTY,
            page_hit_cycles_per_beat: 1.0,
            port_capacity_bytes: 256 << 20,
        }
    }
}

impl HbmConfig {
    /// Default cost parameters over `n_ports` ports, consecutive ports sharing channels evenly.
    pub fn with_ports(n_ports: usize, n_physical_channels: usize) -> Self {
        let per = n_ports.div_ceil(n_physical_channels.max(1)).max(1);
        let mut cfg = HbmConfig {
            n_ports,
            n_physical_channels,
            port_to_channel: (0..n_ports).map(|p| p / per).collect(),
            ..Default::default()
        };
        cfg.peak_bw_gbps = cfg.theoretical_bw_gbps();
        cfg
    }

    pub fn beat_bytes(&self) -> u64 {
        self.port_width_bits / 8
    }

    pub fn page_beats(&self) -> u64 {
        self.page_size_bytes / self.beat_bytes()
    }

    pub fn channel(&self, port: usize) -> usize {
        self.port_to_channel[port]
    }

    /// Port count x width x clock.
    pub fn theoretical_bw_gbps(&self) -> f64 {
        self.n_ports as f64 * self.beat_bytes() as f64 * self.freq_mhz * 1e6 / 1e9
    }

    pub fn validate(&self) -> Result<(), KvError> {
        let bad = |m: String| Err(KvError::Config(m));
        if self.n_ports == 0 || self.n_physical_channels == 0 {
            return bad("port and channel counts must be positive".into());
        }
        if self.port_width_bits == 0 || !self.port_width_bits.is_multiple_of(8) {
            return bad(format!("port width {} is not a positive whole number of bytes", self.port_width_bits));
        }
        if self.port_to_channel.len() != self.n_ports {
            return bad(format!("channel map has {} entries for {} ports", self.port_to_channel.len(), self.n_ports));
        }
        if let Some(&c) = self.port_to_channel.iter().find(|&&c| c >= self.n_physical_channels) {
            return bad(format!("channel {c} out of range"));
        }
        if (0..self.n_physical_channels).any(|c| !self.port_to_channel.contains(&c)) {
            return bad("every physical channel needs at least one port".into());
        }
        if self.page_size_bytes == 0 || !self.page_size_bytes.is_multiple_of(self.beat_bytes()) {
            return bad("page size must be a positive multiple of the beat size".into());
        }
        if self.burst_beats_max == 0 {
            return bad("burst length must be positive".into());
        }
        let costs = [self.freq_mhz, self.page_hit_cycles_per_beat];
        if costs.iter().any(|&v| !(v > 0.0 && v.is_finite()))
            || !(self.page_miss_penalty_cycles >= 0.0 && self.burst_setup_cycles >= 0.0)
        {
            return bad("clock and cost parameters must be finite and non-negative".into());
        }
        let theory = self.theoretical_bw_gbps();
        if ((self.peak_bw_gbps - theory) / theory).abs() > 0.01 {
            return bad(format!(
                "peak {} GB/s disagrees with {theory:.1} GB/s from the port geometry",
                self.peak_bw_gbps
            ));
        }
        Ok(())
    }
}

/// Size of one token's KV entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KvGeometry {
    pub d_model: u64,
    pub dtype_bits: u64,
}

impl Default for KvGeometry {
    fn default() -> Self {
        KvGeometry { d_model: 4096, dtype_bits: 16 }
    }
}

impl KvGeometry {
    pub fn entry_bytes(&self) -> u64 {
        self.d_model * self.dtype_bits / 8
    }

    /// Beats one entry occupies on a port; the entry must be a whole number of beats.
    pub fn token_span_beats(&self, cfg: &HbmConfig) -> Result<u64, KvError> {
        let bits = self.d_model * self.dtype_bits;
        if bits == 0 || !bits.is_multiple_of(cfg.port_width_bits) {
            return Err(KvError::Config(format!(
                "{bits}-bit entry is not a whole number of {}-bit beats",
                cfg.port_width_bits
            )));
        }
        Ok(bits / cfg.port_width_bits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferConfig {
    pub capacity_tokens: usize,
    pub n_read_ports: usize,
    pub n_write_ports: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig { capacity_tokens: 1024, n_read_ports: 16, n_write_ports: 16 }
    }
}
