//! JSON has no NaN: serde_json writes it as `null`. Fields that may hold NaN
//! read `null` back as NaN.

use serde::{Deserialize, Deserializer};

pub fn or_null<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}
