//! Structured responses: a seeded mock proposer standing in for the
//! vision-language model, a strict parser for recorded response files, and
//! the encoder that turns responses into contextual condition tokens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, rng_from_seed};
use crate::scene::{Path, Scenario, Waypoint};
use crate::stats::NoiseModel;
use rand_distr::{Distribution, Normal};

/// Closed set of driving-behavior advice labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Advice {
    Accelerate,
    Decelerate,
    KeepSpeed,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Advice {
    pub const ALL: [Advice; 6] = [
        Advice::Accelerate,
        Advice::Decelerate,
        Advice::KeepSpeed,
        Advice::TurnLeft,
        Advice::TurnRight,
        Advice::Stop,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Advice::Accelerate => "Accelerate",
            Advice::Decelerate => "Decelerate",
            Advice::KeepSpeed => "KeepSpeed",
            Advice::TurnLeft => "TurnLeft",
            Advice::TurnRight => "TurnRight",
            Advice::Stop => "Stop",
        }
    }

    pub fn from_str(s: &str) -> Option<Advice> {
        Advice::ALL.iter().copied().find(|a| a.as_str() == s)
    }

    fn index(&self) -> usize {
        Advice::ALL.iter().position(|a| a == self).unwrap()
    }
}

/// A detected object with its position in the ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "x")]
    pub cx: f64,
    #[serde(rename = "y")]
    pub cy: f64,
}

/// Detections, advice, and a proposed path; the contextual condition
/// source plus the noisy starting path for denoising.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredResponse {
    pub detections: Vec<Detection>,
    pub advice: Advice,
    pub proposed_path: Path,
}

/// One line of a response file: a structured response keyed by scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub scenario_id: String,
    pub detections: Vec<Detection>,
    pub advice: Advice,
    pub path: Path,
}

impl ResponseRecord {
    pub fn new(scenario_id: String, response: StructuredResponse) -> Self {
        Self {
            scenario_id,
            detections: response.detections,
            advice: response.advice,
            path: response.proposed_path,
        }
    }

    pub fn response(&self) -> StructuredResponse {
        StructuredResponse {
            detections: self.detections.clone(),
            advice: self.advice,
            proposed_path: self.path.clone(),
        }
    }
}

/// Token sequence conditioning the denoiser: one token per detection plus
/// one advice token.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding {
    pub tokens: Vec<Vec<f64>>,
}

impl ContextEmbedding {
    pub fn d_model(&self) -> usize {
        self.tokens.first().map(|t| t.len()).unwrap_or(0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("malformed response: {0}")]
    Syntax(String),
    #[error("missing field \"{0}\"")]
    MissingField(&'static str),
    #[error("invalid field \"{field}\": {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("unknown advice label \"{0}\"")]
    UnknownAdvice(String),
    #[error("wrong path length: expected {expected} waypoints, got {got}")]
    WrongPathLength { expected: usize, got: usize },
}

/// Advice thresholds for the mock proposer. The net heading change over
/// the path decides turns; segment-speed ratio decides accelerate or
/// decelerate; a terminal displacement under half a meter reads as a stop.
const TURN_THRESHOLD_RAD: f64 = 0.15;
const SPEED_RATIO_BAND: f64 = 0.10;
const STOP_DISPLACEMENT_M: f64 = 0.05;

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Derive behavior advice from the geometry of a path.
pub fn advice_for_path(path: &Path) -> Advice {
    let wps = &path.waypoints;
    let last = wps[wps.len() - 1];
    if (last.x.powi(2) + last.y.powi(2)).sqrt() < STOP_DISPLACEMENT_M {
        return Advice::Stop;
    }
    if wps.len() >= 2 {
        let first_seg = (wps[0].x, wps[0].y);
        let prev = wps[wps.len() - 2];
        let last_seg = (last.x - prev.x, last.y - prev.y);
        let h0 = first_seg.1.atan2(first_seg.0);
        let h1 = last_seg.1.atan2(last_seg.0);
        let turn = wrap_angle(h1 - h0);
        if turn > TURN_THRESHOLD_RAD {
            return Advice::TurnLeft;
        }
        if turn < -TURN_THRESHOLD_RAD {
            return Advice::TurnRight;
        }
        let v0 = (first_seg.0.powi(2) + first_seg.1.powi(2)).sqrt() / path.dt;
        let v1 = (last_seg.0.powi(2) + last_seg.1.powi(2)).sqrt() / path.dt;
        if v0 > 0.0 {
            let ratio = v1 / v0;
            if ratio > 1.0 + SPEED_RATIO_BAND {
                return Advice::Accelerate;
            }
            if ratio < 1.0 - SPEED_RATIO_BAND {
                return Advice::Decelerate;
            }
        }
    }
    Advice::KeepSpeed
}

/// Mock the fine-tuned VLM: true detections, geometry-derived advice, and
/// the ground-truth path perturbed by i.i.d. Gaussian noise per coordinate
/// drawn from the noise model. Deterministic in `seed`.
pub fn propose(
    scenario: &Scenario,
    noise_model: &NoiseModel,
    seed: u64,
) -> Result<StructuredResponse, crate::stats::StatsError> {
    noise_model.validate()?;
    let detections = scenario
        .obstacles
        .iter()
        .map(|o| Detection {
            label: "object".to_string(),
            cx: o.initial.cx,
            cy: o.initial.cy,
        })
        .collect();
    let advice = advice_for_path(&scenario.gt_path);

    let mut rng = rng_from_seed(derive_seed(seed, 0x9109_05e7));
    let noise_x = Normal::new(noise_model.mean_x, noise_model.std_x).expect("validated");
    let noise_y = Normal::new(noise_model.mean_y, noise_model.std_y).expect("validated");
    let waypoints = scenario
        .gt_path
        .waypoints
        .iter()
        .map(|w| Waypoint::new(w.x + noise_x.sample(&mut rng), w.y + noise_y.sample(&mut rng)))
        .collect();
    let proposed_path = Path {
        dt: scenario.gt_path.dt,
        waypoints,
    };
    Ok(StructuredResponse {
        detections,
        advice,
        proposed_path,
    })
}

fn field<'a>(
    obj: &'a serde_json::Map<String, serde_json::Value>,
    name: &'static str,
) -> Result<&'a serde_json::Value, ParseError> {
    obj.get(name).ok_or(ParseError::MissingField(name))
}

fn as_finite(v: &serde_json::Value, name: &'static str) -> Result<f64, ParseError> {
    v.as_f64()
        .filter(|f| f.is_finite())
        .ok_or_else(|| ParseError::InvalidField {
            field: name,
            reason: format!("expected a finite number, got {v}"),
        })
}

/// Parse one line of the response-file schema, enforcing the closed advice
/// set, finite coordinates, and the configured path length.
pub fn parse_response(text: &str, expected_len: usize) -> Result<ResponseRecord, ParseError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ParseError::Syntax(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| ParseError::Syntax(
        "response line must be a JSON object".into(),
    ))?;

    let scenario_id = field(obj, "scenario_id")?
        .as_str()
        .ok_or_else(|| ParseError::InvalidField {
            field: "scenario_id",
            reason: "expected a string".into(),
        })?
        .to_string();

    let detections_value =
        field(obj, "detections")?
            .as_array()
            .ok_or_else(|| ParseError::InvalidField {
                field: "detections",
                reason: "expected an array".into(),
            })?;
    let mut detections = Vec::with_capacity(detections_value.len());
    for d in detections_value {
        let d = d.as_object().ok_or_else(|| ParseError::InvalidField {
            field: "detections",
            reason: "each detection must be an object".into(),
        })?;
        let label = field(d, "label")?
            .as_str()
            .ok_or_else(|| ParseError::InvalidField {
                field: "label",
                reason: "expected a string".into(),
            })?;
        if label.is_empty() {
            return Err(ParseError::InvalidField {
                field: "label",
                reason: "must be non-empty".into(),
            });
        }
        detections.push(Detection {
            label: label.to_string(),
            cx: as_finite(field(d, "x")?, "x")?,
            cy: as_finite(field(d, "y")?, "y")?,
        });
    }

    let advice_str = field(obj, "advice")?
        .as_str()
        .ok_or_else(|| ParseError::InvalidField {
            field: "advice",
            reason: "expected a string".into(),
        })?;
    let advice =
        Advice::from_str(advice_str).ok_or_else(|| ParseError::UnknownAdvice(advice_str.into()))?;

    let path_obj = field(obj, "path")?
        .as_object()
        .ok_or_else(|| ParseError::InvalidField {
            field: "path",
            reason: "expected an object".into(),
        })?;
    let dt = as_finite(field(path_obj, "dt")?, "dt")?;
    if !(dt > 0.0) {
        return Err(ParseError::InvalidField {
            field: "dt",
            reason: format!("must be > 0, got {dt}"),
        });
    }
    let waypoint_values =
        field(path_obj, "waypoints")?
            .as_array()
            .ok_or_else(|| ParseError::InvalidField {
                field: "waypoints",
                reason: "expected an array".into(),
            })?;
    if waypoint_values.len() != expected_len {
        return Err(ParseError::WrongPathLength {
            expected: expected_len,
            got: waypoint_values.len(),
        });
    }
    let mut waypoints = Vec::with_capacity(waypoint_values.len());
    for w in waypoint_values {
        let pair = w.as_array().filter(|a| a.len() == 2).ok_or_else(|| {
            ParseError::InvalidField {
                field: "waypoints",
                reason: "each waypoint must be a [x, y] pair".into(),
            }
        })?;
        waypoints.push(Waypoint::new(
            as_finite(&pair[0], "waypoints")?,
            as_finite(&pair[1], "waypoints")?,
        ));
    }

    Ok(ResponseRecord {
        scenario_id,
        detections,
        advice,
        path: Path { dt, waypoints },
    })
}

/// Serialize a record to one line of the response-file schema.
pub fn serialize_response(record: &ResponseRecord) -> String {
    serde_json::to_string(record).expect("response records always serialize")
}

/// Seeded, read-only embedding tables mapping labels, positions, and
/// advice into `d_model`-dimensional tokens.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    label_rows: Vec<Vec<f64>>,
    coord_rows: [Vec<f64>; 2],
    advice_rows: Vec<Vec<f64>>,
}

const LABEL_BUCKETS: usize = 64;
/// Detection coordinates are scaled to keep token magnitudes near unity.
const COORD_SCALE: f64 = 0.1;

fn fnv1a(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

impl ContextEncoder {
    pub fn new(table_seed: u64, d_model: usize) -> Self {
        assert!(d_model > 0, "d_model must be positive");
        let mut rng = rng_from_seed(derive_seed(table_seed, 0xc0de));
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut row = |n: usize| -> Vec<f64> { (0..n).map(|_| unit.sample(&mut rng)).collect() };
        let label_rows = (0..LABEL_BUCKETS).map(|_| row(d_model)).collect();
        let coord_rows = [row(d_model), row(d_model)];
        let advice_rows = (0..Advice::ALL.len()).map(|_| row(d_model)).collect();
        Self {
            label_rows,
            coord_rows,
            advice_rows,
        }
    }

    fn detection_token(&self, det: &Detection) -> Vec<f64> {
        let bucket = (fnv1a(&det.label) % LABEL_BUCKETS as u64) as usize;
        let mut token = self.label_rows[bucket].clone();
        for (i, t) in token.iter_mut().enumerate() {
            *t += det.cx * COORD_SCALE * self.coord_rows[0][i]
                + det.cy * COORD_SCALE * self.coord_rows[1][i];
        }
        token
    }

    /// One token per detection plus one advice token.
    pub fn encode(&self, response: &StructuredResponse) -> ContextEmbedding {
        let mut tokens: Vec<Vec<f64>> = response
            .detections
            .iter()
            .map(|d| self.detection_token(d))
            .collect();
        tokens.push(self.advice_rows[response.advice.index()].clone());
        ContextEmbedding { tokens }
    }
}

/// Convenience wrapper constructing the seeded tables on the fly.
pub fn encode_context(
    response: &StructuredResponse,
    table_seed: u64,
    d_model: usize,
) -> ContextEmbedding {
    ContextEncoder::new(table_seed, d_model).encode(response)
}
