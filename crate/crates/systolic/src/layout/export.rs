//! Graph export: DOT for visualization and JSON for golden tests.

use serde_json::json;

use super::{ChannelKind, Endpoint, SpatialGraph};

pub fn to_dot(g: &SpatialGraph) -> String {
    let mut out = String::from("digraph spatial {\n  rankdir=LR;\n");
    for (i, pe) in g.pes.iter().enumerate() {
        let shape = match (pe.placement, pe.is_extern) {
            (crate::ir::Placement::Host, _) => "box3d",
            (_, true) => "component",
            _ => "box",
        };
        out.push_str(&format!(
            "  pe{} [label=\"{}\", shape={}];\n",
            i,
            pe.label(),
            shape
        ));
    }
    let mut hosts = std::collections::BTreeSet::new();
    for c in &g.channels {
        for e in [&c.src, &c.dst] {
            if let Endpoint::Host(n) = e {
                hosts.insert(n.clone());
            }
        }
    }
    for h in &hosts {
        out.push_str(&format!(
            "  \"host_{h}\" [label=\"{h}\", shape=cylinder];\n"
        ));
    }
    for c in &g.channels {
        let name = |e: &Endpoint| match e {
            Endpoint::Pe(i) => format!("pe{i}"),
            Endpoint::Host(n) => format!("\"host_{n}\""),
        };
        let style = match c.kind {
            ChannelKind::Register => "solid",
            ChannelKind::Memory => "dashed",
        };
        let depth = match c.depth {
            Some(d) => d.to_string(),
            None => "∞".to_string(),
        };
        let width = if c.width > 1 {
            format!(" x{}", c.width)
        } else {
            String::new()
        };
        out.push_str(&format!(
            "  {} -> {} [label=\"{} d={}{}\", style={}];\n",
            name(&c.src),
            name(&c.dst),
            c.value,
            depth,
            width,
            style
        ));
    }
    out.push_str("}\n");
    out
}

pub fn to_json(g: &SpatialGraph) -> serde_json::Value {
    let pes: Vec<_> = g
        .pes
        .iter()
        .map(|p| {
            json!({
                "func": p.func,
                "id": p.id,
                "placement": match p.placement {
                    crate::ir::Placement::Host => "host",
                    crate::ir::Placement::Device => "device",
                },
                "extern": p.is_extern,
            })
        })
        .collect();
    let channels: Vec<_> = g
        .channels
        .iter()
        .map(|c| {
            let ep = |e: &Endpoint| match e {
                Endpoint::Pe(i) => json!({"pe": i}),
                Endpoint::Host(n) => json!({"host": n}),
            };
            json!({
                "kind": match c.kind { ChannelKind::Register => "register", ChannelKind::Memory => "memory" },
                "src": ep(&c.src),
                "dst": ep(&c.dst),
                "value": c.value,
                "depth": c.depth,
                "width": c.width,
            })
        })
        .collect();
    json!({ "pes": pes, "channels": channels, "host_funcs": g.host_funcs })
}
