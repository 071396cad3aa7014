use super::buffer::InvarianceBuffer;
use super::config::HbmConfig;
use super::layout::{KvLayout, Placement};
use super::KvError;

/// A token's KV entry needed by the current query, with the layer that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NeededEntry {
    pub token: usize,
    pub prov: usize,
}

/// One HBM access of a whole entry. `port` is `None` for an entry striped over every port.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fetch {
    pub token: usize,
    pub layer: usize,
    pub port: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundSchedule {
    pub round_index: usize,
    /// Layer of the attention being served.
    pub layer: usize,
    pub buffer_valid: bool,
    pub hbm_fetches: Vec<Fetch>,
    /// Fresh KV of the decoded token written back at this layer.
    pub hbm_writes: Vec<Fetch>,
    pub buffer_reads: Vec<usize>,
    /// Fetched tokens copied into the reuse buffer for the next layer.
    pub proactive_writes: Vec<usize>,
}

impl RoundSchedule {
    fn empty(round_index: usize, layer: usize, buffer_valid: bool) -> Self {
        RoundSchedule {
            round_index,
            layer,
            buffer_valid,
            hbm_fetches: Vec::new(),
            hbm_writes: Vec::new(),
            buffer_reads: Vec::new(),
            proactive_writes: Vec::new(),
        }
    }

    pub fn hbm_accesses(&self) -> impl Iterator<Item = &Fetch> {
        self.hbm_writes.iter().chain(&self.hbm_fetches)
    }

    /// Entries delivered to the attention datapath in this round.
    pub fn width(&self) -> usize {
        self.hbm_fetches.len() + self.buffer_reads.len()
    }
}

/// Work of one query token at one layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionStep<'a> {
    pub layer: usize,
    pub needed: &'a [NeededEntry],
    /// Token whose fresh entry is written at this layer.
    pub new_entry: Option<usize>,
    /// Next layer's decisions, when the buffer is maintained; drives proactive writes.
    pub executes_next: Option<&'a [bool]>,
}

struct Slots {
    ports: Vec<bool>,
    cross_channels: Vec<bool>,
    striped: bool,
    reads: usize,
    writes: usize,
}

struct Packer<'a> {
    cfg: &'a HbmConfig,
    read_ports: usize,
    write_ports: usize,
    rounds: Vec<RoundSchedule>,
    slots: Vec<Slots>,
    /// Rounds before these indices have no free port / no free buffer read port.
    hbm_start: usize,
    read_start: usize,
}

impl Packer<'_> {
    fn slot(&mut self, r: usize, layer: usize, valid: bool) {
        if r == self.rounds.len() {
            self.rounds.push(RoundSchedule::empty(r, layer, valid));
            self.slots.push(Slots {
                ports: vec![false; self.cfg.n_ports],
                cross_channels: vec![false; self.cfg.n_physical_channels],
                striped: false,
                reads: 0,
                writes: 0,
            });
        }
    }

    fn fits(&self, r: usize, access: &Fetch, cross: bool, retain: bool) -> bool {
        let s = &self.slots[r];
        if s.striped || (retain && s.writes >= self.write_ports) {
            return false;
        }
        match access.port {
            None => !s.ports.iter().any(|&u| u),
            Some(p) => !s.ports[p] && !(cross && s.cross_channels[self.cfg.channel(p)]),
        }
    }

    fn place(&mut self, access: Fetch, layer: usize, valid: bool, cross: bool, retain: bool, is_write: bool) {
        let mut r = self.hbm_start;
        loop {
            self.slot(r, layer, valid);
            if self.fits(r, &access, cross, retain) {
                break;
            }
            r += 1;
        }
        let s = &mut self.slots[r];
        match access.port {
            None => s.striped = true,
            Some(p) => {
                s.ports[p] = true;
                if cross {
                    s.cross_channels[self.cfg.channel(p)] = true;
                }
            }
        }
        let round = &mut self.rounds[r];
        if is_write {
            round.hbm_writes.push(access);
        } else {
            round.hbm_fetches.push(access);
        }
        if retain {
            s.writes += 1;
            round.proactive_writes.push(access.token);
        }
        while self.slots.get(self.hbm_start).is_some_and(|s| s.striped || s.ports.iter().all(|&u| u)) {
            self.hbm_start += 1;
        }
    }

    fn place_read(&mut self, token: usize, layer: usize, valid: bool) {
        let mut r = self.read_start;
        loop {
            self.slot(r, layer, valid);
            if self.slots[r].reads < self.read_ports {
                break;
            }
            r += 1;
        }
        self.slots[r].reads += 1;
        self.rounds[r].buffer_reads.push(token);
        while self.slots.get(self.read_start).is_some_and(|s| s.reads >= self.read_ports) {
            self.read_start += 1;
        }
    }
}

fn access_for(layouts: &[KvLayout], layer: usize, token: usize) -> Result<Fetch, KvError> {
    let placement =
        layouts.get(layer).and_then(|l| l.placement(token)).ok_or(KvError::UnmappedEntry { layer, token })?;
    let port = match placement {
        Placement::Port { port, .. } => Some(port),
        Placement::Striped { .. } => None,
    };
    Ok(Fetch { token, layer, port })
}

/// Greedy in-order first-fit packing of one layer's accesses into rounds.
///
/// A round holds at most one access per port, at most one cross-layer fetch per physical
/// channel, and a striped access only on its own. Entries held by a valid buffer are read from
/// it instead. `buffer` is `None` when the buffer is disabled.
pub fn schedule_attention(
    step: &AttentionStep<'_>,
    buffer: Option<&InvarianceBuffer>,
    layouts: &[KvLayout],
    cfg: &HbmConfig,
) -> Result<Vec<RoundSchedule>, KvError> {
    let valid = buffer.is_some_and(|b| b.is_valid());
    let (read_ports, write_ports) = buffer.map_or((0, 0), |b| (b.config.n_read_ports, b.config.n_write_ports));
    let mut packer =
        Packer { cfg, read_ports, write_ports, rounds: Vec::new(), slots: Vec::new(), hbm_start: 0, read_start: 0 };
    let retains = |token: usize| buffer.is_some() && step.executes_next.and_then(|n| n.get(token)).is_some_and(|&e| !e);
    if let Some(token) = step.new_entry {
        let w = access_for(layouts, step.layer, token)?;
        packer.place(w, step.layer, valid, false, false, true);
    }
    for e in step.needed {
        if e.prov > step.layer {
            return Err(KvError::Inconsistent {
                step: None,
                layer: step.layer,
                message: format!("token {} has provenance {} above the layer", e.token, e.prov),
            });
        }
        let cross = e.prov < step.layer;
        if cross && buffer.is_some_and(|b| b.holds(e.token, e.prov)) {
            if read_ports == 0 {
                return Err(KvError::Config("buffer without read ports".into()));
            }
            packer.place_read(e.token, step.layer, valid);
        } else {
            let f = access_for(layouts, e.prov, e.token)?;
            if write_ports == 0 && retains(e.token) {
                return Err(KvError::Config("buffer without write ports".into()));
            }
            packer.place(f, step.layer, valid, cross, retains(e.token), false);
        }
    }
    Ok(packer.rounds)
}

/// Checks one round against the port, channel and buffer-port limits.
pub fn check_round(
    round: &RoundSchedule,
    cfg: &HbmConfig,
    read_ports: usize,
    write_ports: usize,
) -> Result<(), KvError> {
    let fail = |m: String| Err(KvError::Illegal { round: round.round_index, message: m });
    if round.buffer_reads.len() > read_ports {
        return fail(format!("{} buffer reads over {read_ports} ports", round.buffer_reads.len()));
    }
    if round.proactive_writes.len() > write_ports {
        return fail(format!("{} proactive writes over {write_ports} ports", round.proactive_writes.len()));
    }
    if !round.buffer_reads.is_empty() && !round.buffer_valid {
        return fail("buffer read while the buffer is invalid".into());
    }
    let accesses: Vec<&Fetch> = round.hbm_accesses().collect();
    if accesses.iter().any(|a| a.port.is_none()) && accesses.len() > 1 {
        return fail("striped access shares its round".into());
    }
    let mut ports = vec![false; cfg.n_ports];
    let mut channels = vec![false; cfg.n_physical_channels];
    for a in &accesses {
        let Some(p) = a.port else { continue };
        if p >= cfg.n_ports || std::mem::replace(&mut ports[p], true) {
            return fail(format!("port {p} used twice"));
        }
    }
    for f in &round.hbm_fetches {
        if let (Some(p), true) = (f.port, f.layer < round.layer) {
            if std::mem::replace(&mut channels[cfg.channel(p)], true) {
                return fail(format!("two cross-layer fetches on channel {}", cfg.channel(p)));
            }
        }
    }
    for t in &round.proactive_writes {
        if !round.hbm_fetches.iter().any(|f| f.token == *t) {
            return fail(format!("proactive write of token {t} that was not fetched"));
        }
    }
    Ok(())
}

/// Checks every round and that each needed entry, and the fresh entry, is served exactly once.
pub fn check_schedule(
    rounds: &[RoundSchedule],
    step: &AttentionStep<'_>,
    cfg: &HbmConfig,
    read_ports: usize,
    write_ports: usize,
) -> Result<(), KvError> {
    for r in rounds {
        check_round(r, cfg, read_ports, write_ports)?;
    }
    let incomplete = |m: String| Err(KvError::Illegal { round: rounds.len(), message: m });
    let n = step.needed.iter().map(|e| e.token + 1).max().unwrap_or(0);
    // per token: the layer fetched from, or None for a buffer read
    let mut served: Vec<Vec<Option<usize>>> = vec![Vec::new(); n];
    for r in rounds {
        let hits =
            r.hbm_fetches.iter().map(|f| (f.token, Some(f.layer))).chain(r.buffer_reads.iter().map(|&t| (t, None)));
        for (t, how) in hits {
            match served.get_mut(t) {
                Some(v) => v.push(how),
                None => return incomplete(format!("token {t} served but not needed")),
            }
        }
    }
    for e in step.needed {
        match std::mem::take(&mut served[e.token]).as_slice() {
            [Some(layer)] if *layer == e.prov => {}
            [None] if e.prov < step.layer => {}
            other => return incomplete(format!("token {} served as {other:?}", e.token)),
        }
    }
    if let Some(t) = served.iter().position(|v| !v.is_empty()) {
        return incomplete(format!("token {t} served but not needed"));
    }
    let writes: Vec<usize> = rounds.iter().flat_map(|r| r.hbm_writes.iter().map(|w| w.token)).collect();
    if writes != step.new_entry.into_iter().collect::<Vec<_>>() {
        return incomplete(format!("fresh-entry writes {writes:?}"));
    }
    Ok(())
}
