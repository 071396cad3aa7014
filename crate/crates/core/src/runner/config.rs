//! `key = value` configuration text.
//!
//! ```text
//! # toy model
//! n_layers = 4
//! d_model = 32
//! skip_prob = 0.25
//! ```
//!
//! One assignment per line; `#` starts a comment line; keys are unique. Each consumer takes the
//! keys it knows and rejects whatever is left, so typos fail loudly with their line number.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::dataflow::{RoutingMode, TileSpec};

use super::RunnerError;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, RunnerError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| RunnerError::Config {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(RunnerError::Config { line, message: format!("bad key {key:?}") });
            }
            if value.is_empty() {
                return Err(RunnerError::Config { line, message: format!("empty value for {key}") });
            }
            if let Some((_, first)) = entries.insert(key.to_string(), (value.to_string(), line)) {
                return Err(RunnerError::Config { line, message: format!("{key} already set on line {first}") });
            }
        }
        Ok(ConfigFile { entries })
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, RunnerError>
    where
        T::Err: fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((value, line)) => {
                value.parse().map(Some).map_err(|e| RunnerError::Config { line, message: format!("{key}: {e}") })
            }
        }
    }

    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), RunnerError>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<(), RunnerError> {
        match self.entries.into_iter().min_by_key(|(_, (_, line))| *line) {
            Some((key, (_, line))) => Err(RunnerError::Config { line, message: format!("unknown key {key}") }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum WeightMode {
    #[default]
    Fp16,
    Int4Symmetric,
}

impl FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fp16" => Ok(WeightMode::Fp16),
            "int4" | "int4_symmetric" => Ok(WeightMode::Int4Symmetric),
            _ => Err(format!("unknown weight mode {s:?} (fp16, int4)")),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Fp16 => "fp16",
            WeightMode::Int4Symmetric => "int4",
        })
    }
}

/// Precision of a run: binary64 with exact products, or binary32 with every reduction
/// through the PE column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum NumericMode {
    #[default]
    Wide,
    Device,
}

impl FromStr for NumericMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wide" => Ok(NumericMode::Wide),
            "device" => Ok(NumericMode::Device),
            _ => Err(format!("unknown mode {s:?} (wide, device)")),
        }
    }
}

impl fmt::Display for NumericMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NumericMode::Wide => "wide",
            NumericMode::Device => "device",
        })
    }
}

fn routing_name(m: RoutingMode) -> &'static str {
    match m {
        RoutingMode::DeterministicArgmax => "argmax",
        RoutingMode::Sampled => "sampled",
    }
}

fn parse_routing(s: &str) -> Result<RoutingMode, String> {
    match s {
        "argmax" => Ok(RoutingMode::DeterministicArgmax),
        "sampled" => Ok(RoutingMode::Sampled),
        _ => Err(format!("unknown routing {s:?} (argmax, sampled)")),
    }
}

/// Toy transformer shape, routing and weight options.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Target skip rate of each router, MHA and FFN alike.
    pub skip_prob: f64,
    pub seed: u64,
    pub weight_mode: WeightMode,
    pub routing: RoutingMode,
    pub tiles: TileSpec,
    pub rope_base: f64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 32,
            n_heads: 4,
            d_head: 8,
            d_ff: 64,
            vocab_size: 256,
            skip_prob: 0.25,
            seed: 1,
            weight_mode: WeightMode::Fp16,
            routing: RoutingMode::DeterministicArgmax,
            tiles: TileSpec { row_tile: 4, col_tile: 8, reduce_tile: 16 },
            rope_base: 10000.0,
            max_positions: 4096,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::Invalid(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.n_heads * self.d_head != self.d_model {
            return bad(format!("{} heads x {} != d_model {}", self.n_heads, self.d_head, self.d_model));
        }
        if !self.d_head.is_multiple_of(2) {
            return bad("rotary embedding needs an even head width".into());
        }
        if !(0.0..=1.0).contains(&self.skip_prob) {
            return bad(format!("skip_prob {} outside [0, 1]", self.skip_prob));
        }
        if self.tiles.row_tile == 0 || self.tiles.col_tile == 0 || self.tiles.reduce_tile == 0 {
            return bad("tile sizes must be positive".into());
        }
        Ok(())
    }

    /// Overrides fields from `file`, consuming the keys it recognizes.
    pub fn apply(&mut self, file: &mut ConfigFile) -> Result<(), RunnerError> {
        file.take_into("n_layers", &mut self.n_layers)?;
        file.take_into("d_model", &mut self.d_model)?;
        file.take_into("n_heads", &mut self.n_heads)?;
        file.take_into("d_ff", &mut self.d_ff)?;
        file.take_into("vocab_size", &mut self.vocab_size)?;
        file.take_into("skip_prob", &mut self.skip_prob)?;
        file.take_into("seed", &mut self.seed)?;
        file.take_into("weight_mode", &mut self.weight_mode)?;
        file.take_into("rope_base", &mut self.rope_base)?;
        file.take_into("max_positions", &mut self.max_positions)?;
        file.take_into("tile_rows", &mut self.tiles.row_tile)?;
        file.take_into("tile_cols", &mut self.tiles.col_tile)?;
        file.take_into("tile_reduce", &mut self.tiles.reduce_tile)?;
        if let Some(r) = file.take::<String>("routing")? {
            self.routing = parse_routing(&r).map_err(RunnerError::Invalid)?;
        }
        self.d_head = self.d_model.checked_div(self.n_heads).unwrap_or(0);
        self.validate()
    }

    /// Resolved settings in the same `key = value` form.
    pub fn to_config_text(&self) -> String {
        format!(
            "n_layers = {}\nd_model = {}\nn_heads = {}\nd_ff = {}\nvocab_size = {}\nskip_prob = {}\nseed = {}\n\
             weight_mode = {}\nrouting = {}\ntile_rows = {}\ntile_cols = {}\ntile_reduce = {}\nrope_base = {}\nmax_positions = {}\n",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
            self.skip_prob,
            self.seed,
            self.weight_mode,
            routing_name(self.routing),
            self.tiles.row_tile,
            self.tiles.col_tile,
            self.tiles.reduce_tile,
            self.rope_base,
            self.max_positions
        )
    }
}

/// Prefill and decode lengths of one speedup-model cell; batch size is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Workload {
    pub prefill_len: usize,
    pub decode_len: usize,
}

pub const PREFILL_LENGTHS: [usize; 4] = [128, 256, 512, 1024];
pub const DECODE_LENGTHS: [usize; 2] = [512, 1024];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut cfg =
            ModelConfig { n_layers: 6, skip_prob: 0.4, weight_mode: WeightMode::Int4Symmetric, ..Default::default() };
        cfg.routing = RoutingMode::Sampled;
        let mut file = ConfigFile::parse(&cfg.to_config_text()).unwrap();
        let mut back = ModelConfig::default();
        back.apply(&mut file).unwrap();
        file.finish().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_point_at_lines() {
        let line_of = |text: &str| -> usize {
            let mut cfg = ModelConfig::default();
            let r = ConfigFile::parse(text).and_then(|mut f| {
                cfg.apply(&mut f)?;
                f.finish()
            });
            match r {
                Err(RunnerError::Config { line, .. }) => line,
                other => panic!("{other:?}"),
            }
        };
        assert_eq!(line_of("# c\nn_layers = 2\nbogus line\n"), 3);
        assert_eq!(line_of("n_layers = two\n"), 1);
        assert_eq!(line_of("seed = 1\n\nseed = 2\n"), 3);
        assert_eq!(line_of("seed = 1\ntypo_key = 3\n"), 2);
        assert_eq!(line_of("weight_mode = int8\n"), 1);
    }

    #[test]
    fn shape_invariants() {
        let mut f = ConfigFile::parse("d_model = 30\nn_heads = 4\n").unwrap();
        assert!(matches!(ModelConfig::default().apply(&mut f), Err(RunnerError::Invalid(_))));
        assert!(ModelConfig { skip_prob: 1.5, ..Default::default() }.validate().is_err());
    }
}
