use super::{InstanceKind, Placement};

/// Free capacity of one server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerSlots {
    pub id: u32,
    pub free_gpus: u32,
    /// The server already hosts a Text, Prefill or Decode instance.
    pub has_text: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementOutcome {
    /// Server for each requested instance, in request order.
    pub servers: Vec<Option<u32>>,
    pub unplaced: usize,
}

fn text_like(kind: InstanceKind) -> bool {
    kind != InstanceKind::Image
}

/// Assigns instances `(kind, tp)` to servers.
///
/// `ColocatePreferred` gives each server at most one text-side instance
/// first, places further text-side instances first-fit, then packs Image
/// instances (largest TP first) into servers that host text instances before
/// the rest. `Spread` walks servers round-robin.
pub fn place(instances: &[(InstanceKind, u32)], servers: &[ServerSlots], policy: Placement) -> PlacementOutcome {
    let mut slots: Vec<ServerSlots> = servers.to_vec();
    let mut out = vec![None; instances.len()];
    match policy {
        Placement::Spread => {
            let mut cursor = 0usize;
            for (i, &(kind, tp)) in instances.iter().enumerate() {
                for step in 0..slots.len() {
                    let s = (cursor + step) % slots.len();
                    if slots[s].free_gpus >= tp {
                        slots[s].free_gpus -= tp;
                        slots[s].has_text |= text_like(kind);
                        out[i] = Some(slots[s].id);
                        cursor = s + 1;
                        break;
                    }
                }
            }
        }
        Placement::ColocatePreferred => {
            let mut order: Vec<usize> = (0..instances.len()).collect();
            // text-side before image, larger TP first, then request order
            order.sort_by_key(|&i| (!text_like(instances[i].0), std::cmp::Reverse(instances[i].1), i));
            for i in order {
                let (kind, tp) = instances[i];
                let fits = |s: &ServerSlots| s.free_gpus >= tp;
                let pick = if text_like(kind) {
                    slots
                        .iter()
                        .position(|s| !s.has_text && fits(s))
                        .or_else(|| slots.iter().position(fits))
                } else {
                    slots
                        .iter()
                        .position(|s| s.has_text && fits(s))
                        .or_else(|| slots.iter().position(fits))
                };
                if let Some(s) = pick {
                    slots[s].free_gpus -= tp;
                    slots[s].has_text |= text_like(kind);
                    out[i] = Some(slots[s].id);
                }
            }
        }
    }
    let unplaced = out.iter().filter(|s| s.is_none()).count();
    PlacementOutcome { servers: out, unplaced }
}

/// Placement of instances added to a running cluster; same rules, applied to
/// the current free capacity.
pub fn place_incremental(instances: &[(InstanceKind, u32)], servers: &[ServerSlots], policy: Placement) -> PlacementOutcome {
    place(instances, servers, policy)
}
