//! Line-oriented KV access trace.
//!
//! ```text
//! # comment lines and blank lines are ignored
//! layers <L> context <C>
//! <step> <layer> <attend 0|1> <lookahead hex> needed:(<token>,<prov>)[,(<token>,<prov>)...]
//! ```
//!
//! One record per (decode step, layer), steps ascending from 0 and layers 0..L within a step.
//! The query of step `s` is token `C + s`. The look-ahead mask is the next layer's attention
//! decision for tokens `0..=C + s`, bit `i` of the hex number being token `i`; it is zero at the
//! last layer. `needed` lists every token's entry with the layer that produced it when the query
//! attends, and is empty otherwise.

use std::fmt::Write as _;

use crate::dataflow::{RouteMask, Submodule};

use super::KvError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub step: usize,
    pub layer: usize,
    pub attend: bool,
    /// Next layer's decision per token `0..=query`.
    pub lookahead: Vec<bool>,
    /// (token, provenance layer)
    pub needed: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessTrace {
    pub n_layers: usize,
    pub context_len: usize,
    pub records: Vec<TraceRecord>,
}

fn hex_encode(bits: &[bool]) -> String {
    let digits = bits.len().div_ceil(4).max(1);
    let mut s = String::with_capacity(digits);
    for d in (0..digits).rev() {
        let nib = (0..4).filter(|&b| bits.get(4 * d + b).copied().unwrap_or(false)).fold(0u32, |a, b| a | (1 << b));
        s.push(char::from_digit(nib, 16).expect("nibble"));
    }
    s
}

fn hex_decode(text: &str, width: usize) -> Result<Vec<bool>, String> {
    if text.is_empty() {
        return Err("empty look-ahead mask".into());
    }
    let mut bits = vec![false; width];
    for (d, c) in text.chars().rev().enumerate() {
        let nib = c.to_digit(16).ok_or_else(|| format!("bad hex digit {c:?}"))?;
        for b in 0..4 {
            if nib & (1 << b) != 0 {
                let i = 4 * d + b;
                if i >= width {
                    return Err(format!("look-ahead bit {i} beyond the {width} visible tokens"));
                }
                bits[i] = true;
            }
        }
    }
    Ok(bits)
}

fn parse_needed(text: &str) -> Result<Vec<(usize, usize)>, String> {
    let body = text.strip_prefix("needed:").ok_or("expected needed:(token,prov) list")?;
    let mut out = Vec::new();
    let mut rest = body;
    while !rest.is_empty() {
        let inner = rest.strip_prefix('(').ok_or_else(|| format!("expected '(' at {rest:.12?}"))?;
        let close = inner.find(')').ok_or("unclosed '('")?;
        let (t, p) = inner[..close].split_once(',').ok_or("pair needs token,prov")?;
        let t = t.parse().map_err(|_| format!("bad token {t:?}"))?;
        let p = p.parse().map_err(|_| format!("bad provenance {p:?}"))?;
        out.push((t, p));
        rest = &inner[close + 1..];
        if let Some(r) = rest.strip_prefix(',') {
            if r.is_empty() {
                return Err("trailing ','".into());
            }
            rest = r;
        } else if !rest.is_empty() {
            return Err(format!("unexpected {rest:.12?}"));
        }
    }
    Ok(out)
}

impl AccessTrace {
    /// Decode steps covered, counting partially written steps.
    pub fn steps(&self) -> usize {
        self.records.len().div_ceil(self.n_layers.max(1))
    }

    pub fn query_token(&self, step: usize) -> usize {
        self.context_len + step
    }

    /// Records for steps `0..steps` derived from a mask over at least `context_len + steps` tokens.
    pub fn from_mask(mask: &RouteMask, context_len: usize, steps: usize) -> Result<Self, KvError> {
        let n_layers = mask.n_layers();
        if mask.n_tokens() < context_len + steps || n_layers == 0 {
            return Err(KvError::Config(format!(
                "mask of {} tokens cannot cover {context_len}+{steps}",
                mask.n_tokens()
            )));
        }
        let mut records = Vec::with_capacity(steps * n_layers);
        for step in 0..steps {
            let t = context_len + step;
            for layer in 0..n_layers {
                let attend = mask.executes(layer, Submodule::Mha, t);
                let lookahead = if layer + 1 < n_layers {
                    (0..=t).map(|i| mask.executes(layer + 1, Submodule::Mha, i)).collect()
                } else {
                    vec![false; t + 1]
                };
                let needed = if attend {
                    (0..=t)
                        .map(|i| {
                            mask.last_executed(layer, i).map(|p| (i, p)).ok_or(KvError::Inconsistent {
                                step: Some(step),
                                layer,
                                message: format!("token {i} has no provenance"),
                            })
                        })
                        .collect::<Result<_, _>>()?
                } else {
                    Vec::new()
                };
                records.push(TraceRecord { step, layer, attend, lookahead, needed });
            }
        }
        Ok(AccessTrace { n_layers, context_len, records })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("layers {} context {}\n", self.n_layers, self.context_len);
        for r in &self.records {
            let _ = write!(s, "{} {} {} {} needed:", r.step, r.layer, u8::from(r.attend), hex_encode(&r.lookahead));
            for (k, (t, p)) in r.needed.iter().enumerate() {
                let _ = write!(s, "{}({t},{p})", if k == 0 { "" } else { "," });
            }
            s.push('\n');
        }
        s
    }

    /// Strict parser; record shape and ordering errors carry 1-based line numbers.
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut header: Option<(usize, usize)> = None;
        let mut records = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| KvError::Trace { line, message };
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let Some((n_layers, context_len)) = header else {
                match fields.as_slice() {
                    ["layers", l, "context", c] => {
                        let l: usize = l.parse().map_err(|_| err(format!("bad layer count {l:?}")))?;
                        let c: usize = c.parse().map_err(|_| err(format!("bad context length {c:?}")))?;
                        if l == 0 {
                            return Err(err("layer count must be positive".into()));
                        }
                        header = Some((l, c));
                        continue;
                    }
                    _ => return Err(err("expected header `layers <L> context <C>`".into())),
                }
            };
            let [step, layer, attend, hex, needed] = fields.as_slice() else {
                return Err(err(format!("expected 5 fields, found {}", fields.len())));
            };
            let step: usize = step.parse().map_err(|_| err(format!("bad step {step:?}")))?;
            let layer: usize = layer.parse().map_err(|_| err(format!("bad layer {layer:?}")))?;
            let expected = records.len();
            if step != expected / n_layers || layer != expected % n_layers {
                return Err(err(format!(
                    "expected record for step {} layer {}",
                    expected / n_layers,
                    expected % n_layers
                )));
            }
            let attend = match *attend {
                "0" => false,
                "1" => true,
                other => return Err(err(format!("attend flag must be 0 or 1, got {other:?}"))),
            };
            let lookahead = hex_decode(hex, context_len + step + 1).map_err(err)?;
            let needed = parse_needed(needed).map_err(err)?;
            records.push(TraceRecord { step, layer, attend, lookahead, needed });
        }
        let (n_layers, context_len) = header.ok_or(KvError::Trace { line: 0, message: "missing header".into() })?;
        if records.len() % n_layers != 0 {
            return Err(KvError::Trace { line: text.lines().count(), message: "last step is missing layers".into() });
        }
        Ok(AccessTrace { n_layers, context_len, records })
    }

    /// Rebuilds the attention mask implied by the look-ahead bits and checks every record against
    /// it: layer 0 always attends, repeated bits agree across steps, attend flags match, the last
    /// layer's look-ahead is empty, and `needed` lists each token once with its provenance.
    /// FFN decisions are not part of the trace and come back as all-execute.
    pub fn validate(&self) -> Result<RouteMask, KvError> {
        let n_layers = self.n_layers;
        let steps = self.steps();
        let n_tokens = self.context_len + steps;
        let fail = |r: &TraceRecord, message: String| {
            Err(KvError::Inconsistent { step: Some(r.step), layer: r.layer, message })
        };
        // ex[layer][token]
        let mut ex: Vec<Vec<Option<bool>>> = vec![vec![None; n_tokens]; n_layers];
        ex[0].iter_mut().for_each(|e| *e = Some(true));
        for r in &self.records {
            let t = self.query_token(r.step);
            if r.lookahead.len() != t + 1 {
                return fail(r, format!("look-ahead covers {} tokens, expected {}", r.lookahead.len(), t + 1));
            }
            if r.layer + 1 == n_layers {
                if r.lookahead.iter().any(|&b| b) {
                    return fail(r, "look-ahead beyond the last layer".into());
                }
                continue;
            }
            for (i, &b) in r.lookahead.iter().enumerate() {
                match ex[r.layer + 1][i] {
                    Some(prev) if prev != b => return fail(r, format!("token {i} decision changed between steps")),
                    _ => ex[r.layer + 1][i] = Some(b),
                }
            }
        }
        let mut mask = RouteMask::new(n_layers);
        for i in 0..n_tokens {
            let col: Vec<bool> = ex.iter().map(|layer| layer[i].unwrap_or(false)).collect();
            mask.push_token(&col, &vec![true; n_layers]).map_err(|e| KvError::Config(e.to_string()))?;
        }
        for r in &self.records {
            let t = self.query_token(r.step);
            if ex[r.layer][t].is_some_and(|e| e != r.attend) || (ex[r.layer][t].is_none() && r.attend) {
                return fail(r, format!("attend flag {} disagrees with the look-ahead mask", r.attend));
            }
            if !r.attend {
                if !r.needed.is_empty() {
                    return fail(r, "needed entries listed for a skipped attention".into());
                }
                continue;
            }
            let mut seen = vec![false; t + 1];
            for &(tok, prov) in &r.needed {
                if tok > t || std::mem::replace(&mut seen[tok], true) {
                    return fail(r, format!("token {tok} listed twice or beyond the query"));
                }
                if mask.last_executed(r.layer, tok) != Some(prov) {
                    return fail(
                        r,
                        format!("token {tok} provenance {prov}, mask says {:?}", mask.last_executed(r.layer, tok)),
                    );
                }
            }
            if r.needed.len() != t + 1 {
                return fail(r, format!("{} of {} tokens listed", r.needed.len(), t + 1));
            }
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_mask() -> RouteMask {
        let mut m = RouteMask::new(3);
        let cols =
            [[true, true, false], [true, false, true], [true, false, false], [true, true, true], [true, true, false]];
        for c in cols {
            m.push_token(&c, &[true; 3]).unwrap();
        }
        m
    }

    #[test]
    fn hex_round_trip_and_bounds() {
        let bits = vec![true, false, true, true, false, false, false, false, true];
        let h = hex_encode(&bits);
        assert_eq!(h, "10d");
        assert_eq!(hex_decode(&h, 9).unwrap(), bits);
        assert!(hex_decode("200", 9).is_err());
        assert_eq!(hex_decode("0000", 3).unwrap(), vec![false; 3]);
    }

    #[test]
    fn text_round_trip_and_validation() {
        let mask = small_mask();
        let trace = AccessTrace::from_mask(&mask, 3, 2).unwrap();
        let text = trace.to_text();
        assert!(text.starts_with("layers 3 context 3\n0 0 1 "));
        let back = AccessTrace::parse(&text).unwrap();
        assert_eq!(back, trace);
        let rebuilt = back.validate().unwrap();
        for t in 0..5 {
            for l in 0..3 {
                assert_eq!(rebuilt.last_executed(l, t), mask.last_executed(l, t));
            }
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let good = AccessTrace::from_mask(&small_mask(), 3, 1).unwrap().to_text();
        let cases = [
            (good.replacen("layers", "layer", 1), 1),
            (good.replace("needed:(0,0)", "needed:(0;0)"), 2),
            (good.replacen("0 1 1 ", "0 2 1 ", 1), 3),
            (format!("# c\n\n{}", good.replacen(" 1 ", " 7 ", 1)), 4),
        ];
        for (text, line) in cases {
            match AccessTrace::parse(&text) {
                Err(KvError::Trace { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn inconsistent_provenance_rejected() {
        let mut trace = AccessTrace::from_mask(&small_mask(), 3, 1).unwrap();
        let rec = trace.records.iter_mut().find(|r| r.attend && r.layer == 2).unwrap();
        rec.needed[2].1 = 1;
        assert!(matches!(trace.validate(), Err(KvError::Inconsistent { .. })));
        let mut trace = AccessTrace::from_mask(&small_mask(), 3, 1).unwrap();
        trace.records[0].attend = false;
        trace.records[0].needed.clear();
        assert!(trace.validate().is_err());
    }

    proptest! {
        #[test]
        fn random_masks_round_trip(bits in proptest::collection::vec(any::<bool>(), 4 * 9), ctx in 1usize..6) {
            let mut m = RouteMask::new(4);
            for tok in 0..9 {
                let col: Vec<bool> = (0..4).map(|l| l == 0 || bits[tok * 4 + l]).collect();
                m.push_token(&col, &[true; 4]).unwrap();
            }
            let steps = 9 - ctx;
            let trace = AccessTrace::from_mask(&m, ctx, steps).unwrap();
            let back = AccessTrace::parse(&trace.to_text()).unwrap();
            prop_assert_eq!(&back, &trace);
            let rebuilt = back.validate().unwrap();
            for tok in 0..9 {
                for l in 0..4 {
                    prop_assert_eq!(rebuilt.last_executed(l, tok), m.last_executed(l, tok));
                }
            }
        }
    }
}
