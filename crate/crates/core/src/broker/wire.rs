//! Line protocol between UEs and the broker.
//!
//! One message per `\n`-terminated line; fields are space-separated
//! `key=value` pairs in the order documented in `docs/PROTOCOL.md`. The first
//! field is always `type=`. Per-application groups start at an `app=` field and
//! run until the next one. Floats use Rust's shortest round-trip formatting, so
//! `decode(encode(m)) == m` holds bit for bit. Unknown keys are skipped.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::ids::{AppId, UeId};
use crate::utility::UtilityFunction;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("frame is not newline-terminated (truncated)")]
    Truncated,
    #[error("empty frame")]
    Empty,
    #[error("missing field `{0}`")]
    Missing(&'static str),
    #[error("malformed field `{field}`: {reason}")]
    Malformed { field: String, reason: String },
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("field `apps` says {declared} application(s) but {found} follow")]
    AppCount { declared: usize, found: usize },
}

fn malformed(field: &str, reason: impl Into<String>) -> WireError {
    WireError::Malformed {
        field: field.to_owned(),
        reason: reason.into(),
    }
}

/// One application record inside a registration.
#[derive(Debug, Clone, PartialEq)]
pub struct AppParams {
    pub app_id: AppId,
    pub utility: UtilityFunction,
    pub alpha: f64,
    /// `None` lets the broker pick its default cap.
    pub rate_cap: Option<f64>,
}

/// A UE announcing (or re-announcing) its applications.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisterMessage {
    pub ue_id: UeId,
    pub beta: f64,
    pub apps: Vec<AppParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppAllocation {
    pub app_id: AppId,
    pub rate: f64,
}

/// Rates the broker assigns to one UE's applications at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMessage {
    pub ue_id: UeId,
    pub epoch: u64,
    pub shadow_price: f64,
    pub apps: Vec<AppAllocation>,
}

/// Why a registration was refused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub ue_id: UeId,
    /// Offending field, e.g. `alpha` or `apps.yt1.utility`.
    pub field: String,
    /// Short machine-readable reason code.
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register(RegisterMessage),
    Rate(RateMessage),
    Ack { ue_id: UeId, epoch: u64 },
    Reject(Rejection),
    Depart { ue_id: UeId },
}

impl From<RegisterMessage> for Message {
    fn from(m: RegisterMessage) -> Self {
        Self::Register(m)
    }
}

impl From<RateMessage> for Message {
    fn from(m: RateMessage) -> Self {
        Self::Rate(m)
    }
}

/// Serializes a message as one `\n`-terminated line.
pub fn encode(msg: &Message) -> String {
    let mut s = String::new();
    // write! into a String cannot fail
    match msg {
        Message::Register(m) => {
            let _ = write!(
                s,
                "type=register ue={} beta={:?} apps={}",
                m.ue_id,
                m.beta,
                m.apps.len()
            );
            for a in &m.apps {
                let _ = write!(s, " app={}", a.app_id);
                match a.utility {
                    UtilityFunction::Sigmoidal { a: slope, b } => {
                        let _ = write!(s, " utility=sigmoidal a={slope:?} b={b:?}");
                    }
                    UtilityFunction::Logarithmic { k, r_max } => {
                        let _ = write!(s, " utility=logarithmic k={k:?} r_max={r_max:?}");
                    }
                }
                let _ = write!(s, " alpha={:?}", a.alpha);
                if let Some(cap) = a.rate_cap {
                    let _ = write!(s, " cap={cap:?}");
                }
            }
        }
        Message::Rate(m) => {
            let _ = write!(
                s,
                "type=rate ue={} epoch={} price={:?} apps={}",
                m.ue_id,
                m.epoch,
                m.shadow_price,
                m.apps.len()
            );
            for a in &m.apps {
                let _ = write!(s, " app={} rate={:?}", a.app_id, a.rate);
            }
        }
        Message::Ack { ue_id, epoch } => {
            let _ = write!(s, "type=ack ue={ue_id} epoch={epoch}");
        }
        Message::Reject(r) => {
            let _ = write!(
                s,
                "type=reject ue={} field={} reason={}",
                r.ue_id, r.field, r.reason
            );
        }
        Message::Depart { ue_id } => {
            let _ = write!(s, "type=depart ue={ue_id}");
        }
    }
    s.push('\n');
    s
}

/// Parses one `\n`-terminated line.
pub fn decode(frame: &str) -> Result<Message, WireError> {
    let line = frame.strip_suffix('\n').ok_or(WireError::Truncated)?;
    let line = line.strip_suffix('\r').unwrap_or(line);
    let mut fields = Vec::new();
    for tok in line.split(' ').filter(|t| !t.is_empty()) {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| malformed(tok, "expected key=value"))?;
        fields.push((k, v));
    }
    let Some(&(first, kind)) = fields.first() else {
        return Err(WireError::Empty);
    };
    if first != "type" {
        return Err(WireError::Missing("type"));
    }

    // header runs until the first app group
    let split = fields
        .iter()
        .position(|(k, _)| *k == "app")
        .unwrap_or(fields.len());
    let header = Fields(&fields[1..split]);
    let groups: Vec<Fields> = group_apps(&fields[split..]);

    match kind {
        "register" => {
            let ue_id = header.id::<UeId>("ue")?;
            let beta = header.num("beta")?;
            let declared: usize = header.num("apps")?;
            check_count(declared, groups.len())?;
            let apps = groups
                .iter()
                .map(|g| {
                    let app_id = g.id::<AppId>("app")?;
                    let utility = match g.req("utility")? {
                        "sigmoidal" => UtilityFunction::Sigmoidal {
                            a: g.num("a")?,
                            b: g.num("b")?,
                        },
                        "logarithmic" => UtilityFunction::Logarithmic {
                            k: g.num("k")?,
                            r_max: g.num("r_max")?,
                        },
                        other => {
                            return Err(malformed("utility", format!("unknown variant `{other}`")))
                        }
                    };
                    Ok(AppParams {
                        app_id,
                        utility,
                        alpha: g.num("alpha")?,
                        rate_cap: g.opt_num("cap")?,
                    })
                })
                .collect::<Result<_, _>>()?;
            Ok(Message::Register(RegisterMessage { ue_id, beta, apps }))
        }
        "rate" => {
            let ue_id = header.id::<UeId>("ue")?;
            let epoch = header.num("epoch")?;
            let shadow_price = header.num("price")?;
            let declared: usize = header.num("apps")?;
            check_count(declared, groups.len())?;
            let apps = groups
                .iter()
                .map(|g| {
                    Ok(AppAllocation {
                        app_id: g.id("app")?,
                        rate: g.num("rate")?,
                    })
                })
                .collect::<Result<_, _>>()?;
            Ok(Message::Rate(RateMessage {
                ue_id,
                epoch,
                shadow_price,
                apps,
            }))
        }
        "ack" => Ok(Message::Ack {
            ue_id: header.id("ue")?,
            epoch: header.num("epoch")?,
        }),
        "reject" => Ok(Message::Reject(Rejection {
            ue_id: header.id("ue")?,
            field: header.req("field")?.to_owned(),
            reason: header.req("reason")?.to_owned(),
        })),
        "depart" => Ok(Message::Depart {
            ue_id: header.id("ue")?,
        }),
        other => Err(WireError::UnknownType(other.to_owned())),
    }
}

fn check_count(declared: usize, found: usize) -> Result<(), WireError> {
    if declared == found {
        Ok(())
    } else {
        Err(WireError::AppCount { declared, found })
    }
}

fn group_apps<'a>(fields: &'a [(&'a str, &'a str)]) -> Vec<Fields<'a>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=fields.len() {
        if i == fields.len() || fields[i].0 == "app" {
            if start < i {
                out.push(Fields(&fields[start..i]));
            }
            start = i;
        }
    }
    out
}

struct Fields<'a>(&'a [(&'a str, &'a str)]);

impl Fields<'_> {
    fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn req(&self, key: &'static str) -> Result<&str, WireError> {
        self.get(key).ok_or(WireError::Missing(key))
    }

    fn num<T: FromStr>(&self, key: &'static str) -> Result<T, WireError> {
        let v = self.req(key)?;
        v.parse()
            .map_err(|_| malformed(key, format!("cannot parse `{v}`")))
    }

    fn opt_num<T: FromStr>(&self, key: &'static str) -> Result<Option<T>, WireError> {
        self.get(key).map(|_| self.num(key)).transpose()
    }

    fn id<T: TryFrom<String>>(&self, key: &'static str) -> Result<T, WireError> {
        let v = self.req(key)?;
        T::try_from(v.to_owned()).map_err(|_| malformed(key, format!("invalid identifier `{v}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn register() -> RegisterMessage {
        RegisterMessage {
            ue_id: UeId::new("ue1").unwrap(),
            beta: 1.0,
            apps: vec![
                AppParams {
                    app_id: AppId::new("yt1").unwrap(),
                    utility: UtilityFunction::sigmoidal(0.148, 470.0),
                    alpha: 0.75,
                    rate_cap: None,
                },
                AppParams {
                    app_id: AppId::new("http1").unwrap(),
                    utility: UtilityFunction::logarithmic(17.0, 1000.0),
                    alpha: 0.25,
                    rate_cap: Some(1000.0),
                },
            ],
        }
    }

    #[test]
    fn golden_register_line() {
        assert_eq!(
            encode(&register().into()),
            "type=register ue=ue1 beta=1.0 apps=2 \
             app=yt1 utility=sigmoidal a=0.148 b=470.0 alpha=0.75 \
             app=http1 utility=logarithmic k=17.0 r_max=1000.0 alpha=0.25 cap=1000.0\n"
        );
    }

    #[test]
    fn golden_rate_line() {
        let m = RateMessage {
            ue_id: UeId::new("ue2").unwrap(),
            epoch: 7,
            shadow_price: 2.25e-4,
            apps: vec![AppAllocation {
                app_id: AppId::new("http1").unwrap(),
                rate: 486.5,
            }],
        };
        assert_eq!(
            encode(&m.into()),
            "type=rate ue=ue2 epoch=7 price=0.000225 apps=1 app=http1 rate=486.5\n"
        );
    }

    #[test]
    fn register_round_trips_both_variants() {
        let m: Message = register().into();
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn control_messages_round_trip() {
        let ue = UeId::new("ue9").unwrap();
        for m in [
            Message::Ack {
                ue_id: ue.clone(),
                epoch: 3,
            },
            Message::Depart { ue_id: ue.clone() },
            Message::Reject(Rejection {
                ue_id: ue,
                field: "alpha".into(),
                reason: "alpha_sum".into(),
            }),
        ] {
            assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }

    #[test]
    fn truncated_frames_are_rejected() {
        let line = encode(&register().into());
        assert_eq!(decode(line.trim_end()), Err(WireError::Truncated));
        // cut inside the second app group, then terminate
        let cut = line.find("app=http1").unwrap();
        let err = decode(&format!("{}\n", &line[..cut])).unwrap_err();
        assert_eq!(
            err,
            WireError::AppCount {
                declared: 2,
                found: 1
            }
        );
        let cut = line.find(" alpha=0.25").unwrap();
        assert_eq!(
            decode(&format!("{}\n", &line[..cut])),
            Err(WireError::Missing("alpha"))
        );
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let m = decode("type=ack ue=u1 epoch=4 color=blue\n").unwrap();
        assert_eq!(
            m,
            Message::Ack {
                ue_id: UeId::new("u1").unwrap(),
                epoch: 4
            }
        );
        let m =
            decode("type=rate ue=u1 epoch=1 price=1e-3 apps=1 app=a rate=2.5 prio=high\n").unwrap();
        assert!(matches!(m, Message::Rate(_)));
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(
            decode("type=ack ue=u1 epoch=x\n"),
            Err(malformed("epoch", "cannot parse `x`"))
        );
        assert_eq!(decode("type=ack epoch=1\n"), Err(WireError::Missing("ue")));
        assert_eq!(decode("ue=u1 type=ack\n"), Err(WireError::Missing("type")));
        assert_eq!(decode("\n"), Err(WireError::Empty));
        assert!(matches!(
            decode("type=nope\n"),
            Err(WireError::UnknownType(_))
        ));
        assert!(matches!(
            decode("type=register ue=u beta=1 apps=1 app=a utility=cubic alpha=1\n"),
            Err(WireError::Malformed { field, .. }) if field == "utility"
        ));
        assert!(matches!(
            decode("type=ack ue=u1 epoch\n"),
            Err(WireError::Malformed { .. })
        ));
    }

    #[test]
    fn extreme_floats_survive() {
        let mut m = register();
        m.beta = 5e-324;
        m.apps[0].alpha = -0.0;
        m.apps[1].rate_cap = Some(1.7976931348623157e308);
        let Message::Register(back) = decode(&encode(&m.clone().into())).unwrap() else {
            panic!()
        };
        assert_eq!(back.beta.to_bits(), m.beta.to_bits());
        assert_eq!(back.apps[0].alpha.to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.apps[1].rate_cap, m.apps[1].rate_cap);
    }
}
