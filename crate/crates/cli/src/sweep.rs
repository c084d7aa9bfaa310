//! Parameter grids over scalar scenario fields.

use serde_json::Value;
use snap_core::netsim::ScenarioConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    /// Dotted path into the scenario, e.g. `p2` or `mesh.neighbors`.
    pub field: String,
    pub values: Vec<f64>,
}

fn tidy(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Parses `field=start:stop:step` (stop inclusive) or `field=v1,v2,...`.
/// `stop < start` and an empty list both give an empty grid.
pub fn parse_grid(arg: &str) -> Result<Grid, String> {
    let (field, rhs) = arg
        .split_once('=')
        .ok_or_else(|| format!("--vary expects field=start:stop:step, got {arg:?}"))?;
    let field = field.trim();
    if field.is_empty() {
        return Err("--vary: empty field name".into());
    }
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("--vary: {s:?} is not a number"));
    let rhs = rhs.trim();
    let values = if rhs.is_empty() {
        Vec::new()
    } else if rhs.contains(':') {
        let parts: Vec<&str> = rhs.split(':').collect();
        let [a, b, s] = parts[..] else {
            return Err(format!("--vary: range must be start:stop:step, got {rhs:?}"));
        };
        let (a, b, s) = (num(a)?, num(b)?, num(s)?);
        if !(s > 0.0 && s.is_finite()) {
            return Err("--vary: step must be > 0".into());
        }
        if b < a {
            Vec::new()
        } else {
            let count = ((b - a) / s + 1e-9).floor() as usize + 1;
            (0..count).map(|i| tidy(a + i as f64 * s)).collect()
        }
    } else {
        rhs.split(',').map(num).collect::<Result<_, _>>()?
    };
    Ok(Grid {
        field: field.to_string(),
        values,
    })
}

/// Copy of `base` with the scalar at `field` set to `value`.
pub fn apply(base: &ScenarioConfig, field: &str, value: f64) -> Result<ScenarioConfig, String> {
    let mut doc = serde_json::to_value(base).map_err(|e| e.to_string())?;
    let mut slot = &mut doc;
    for part in field.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| format!("--vary: unknown scenario field {field:?}"))?;
    }
    let new = match slot {
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(format!("--vary: {field} takes non-negative integers, got {value}"));
            }
            Value::from(value as u64)
        }
        Value::Number(_) => Value::from(value),
        _ => return Err(format!("--vary: {field} is not a scalar numeric field")),
    };
    *slot = new;
    let cfg: ScenarioConfig = serde_json::from_value(doc).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}
