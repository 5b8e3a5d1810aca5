/// Human-readable names of the 43 sign classes, indexed by label.
pub const SIGN_CLASS_NAMES: [&str; 43] = [
    "speed-limit-20",
    "speed-limit-30",
    "speed-limit-50",
    "speed-limit-60",
    "speed-limit-70",
    "speed-limit-80",
    "end-speed-limit-80",
    "speed-limit-100",
    "speed-limit-120",
    "no-passing",
    "no-passing-heavy-vehicles",
    "right-of-way-next-intersection",
    "priority-road",
    "yield",
    "stop",
    "no-vehicles",
    "heavy-vehicles-prohibited",
    "no-entry",
    "general-caution",
    "dangerous-curve-left",
    "dangerous-curve-right",
    "double-curve",
    "bumpy-road",
    "slippery-road",
    "road-narrows-right",
    "road-work",
    "traffic-signals",
    "pedestrians",
    "children-crossing",
    "bicycles-crossing",
    "beware-ice-snow",
    "wild-animals-crossing",
    "end-all-restrictions",
    "turn-right-ahead",
    "turn-left-ahead",
    "ahead-only",
    "go-straight-or-right",
    "go-straight-or-left",
    "keep-right",
    "keep-left",
    "roundabout-mandatory",
    "end-no-passing",
    "end-no-passing-heavy-vehicles",
];

pub fn class_name(label: usize) -> &'static str {
    SIGN_CLASS_NAMES.get(label).copied().unwrap_or("unknown")
}
