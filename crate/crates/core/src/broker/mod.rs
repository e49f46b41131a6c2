//! The rate broker: a registry of UEs, the allocation it last computed, and
//! the messages that carry rates back to UEs.
//!
//! [`BrokerState`] is a plain state machine with no I/O; [`service`] wraps it in
//! a TCP listener and [`wire`] defines the line protocol.

pub mod service;
pub mod wire;

use std::collections::BTreeMap;
use std::io::{self, Write};

use crate::fmt::sig9;
use crate::ids::{AppId, UeId};
use crate::solver::{
    self, default_rate_cap, AllocationProblem, AllocationResult, AppDescriptor, AppRate,
    SolverError, UserProfile,
};
use wire::{AppAllocation, RateMessage, RegisterMessage, Rejection};

pub const EPOCH_LOG_HEADER: &str = "epoch,shadow_price,ue_id,app_id,rate_kbps";

/// One dispatched allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub shadow_price: f64,
    pub rates: Vec<AppRate>,
}

impl EpochRecord {
    /// Appends one CSV row per app (no header).
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.rates {
            writeln!(
                out,
                "{},{},{},{},{}",
                self.epoch,
                sig9(self.shadow_price),
                r.ue_id,
                r.app_id,
                sig9(r.rate)
            )?;
        }
        Ok(())
    }
}

/// What happened during one registry mutation.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    /// A new epoch was computed; one message per registered UE.
    Dispatched(Vec<RateMessage>),
    /// Registry is empty; nothing to send.
    Empty,
    /// The solver failed; previous rates stay in force and no epoch is used.
    SolverFailed(SolverError),
}

#[derive(Debug, Clone)]
pub struct BrokerState {
    registry: BTreeMap<UeId, UserProfile>,
    capacity: f64,
    tolerance: f64,
    last: Option<EpochRecord>,
    epoch: u64,
}

impl BrokerState {
    pub fn new(capacity: f64, tolerance: f64) -> Result<Self, SolverError> {
        // validate R and delta via an empty problem
        AllocationProblem {
            users: Vec::new(),
            capacity,
            tolerance,
        }
        .validate()?;
        Ok(Self {
            registry: BTreeMap::new(),
            capacity,
            tolerance,
            last: None,
            epoch: 0,
        })
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn registry(&self) -> &BTreeMap<UeId, UserProfile> {
        &self.registry
    }

    pub fn last_epoch(&self) -> Option<&EpochRecord> {
        self.last.as_ref()
    }

    /// Rate last dispatched to `app`, if any.
    pub fn rate(&self, app: &AppId) -> Option<f64> {
        self.last
            .as_ref()?
            .rates
            .iter()
            .find(|r| &r.app_id == app)
            .map(|r| r.rate)
    }

    /// Builds the profile a registration describes, filling in default caps.
    pub fn profile_from(&self, msg: &RegisterMessage) -> UserProfile {
        UserProfile {
            ue_id: msg.ue_id.clone(),
            beta: msg.beta,
            apps: msg
                .apps
                .iter()
                .map(|a| AppDescriptor {
                    app_id: a.app_id.clone(),
                    ue_id: msg.ue_id.clone(),
                    utility: a.utility,
                    alpha: a.alpha,
                    rate_cap: a
                        .rate_cap
                        .unwrap_or_else(|| default_rate_cap(&a.utility, self.capacity)),
                })
                .collect(),
        }
    }

    /// Validates and upserts a UE, then reallocates.
    ///
    /// A rejected registration leaves the registry and epoch untouched.
    pub fn handle_register(&mut self, msg: &RegisterMessage) -> Result<Outcome, Rejection> {
        let profile = self.profile_from(msg);
        self.check(&profile).map_err(|e| rejection(&msg.ue_id, e))?;
        self.registry.insert(profile.ue_id.clone(), profile);
        Ok(self.reallocate())
    }

    /// Removes a UE. Returns `None` if it was not registered.
    pub fn handle_depart(&mut self, ue: &UeId) -> Option<Outcome> {
        self.registry.remove(ue)?;
        Some(self.reallocate())
    }

    /// Solves over the current registry and advances the epoch.
    pub fn reallocate(&mut self) -> Outcome {
        if self.registry.is_empty() {
            return Outcome::Empty;
        }
        let problem = AllocationProblem {
            users: self.registry.values().cloned().collect(),
            capacity: self.capacity,
            tolerance: self.tolerance,
        };
        let (rates, shadow_price) = match solver::solve(&problem) {
            Ok(AllocationResult {
                rates,
                shadow_price,
                ..
            }) => (rates, shadow_price),
            Err(SolverError::NoActiveApps) => {
                // everyone idle: dispatch zeros at price 0
                let zeros = problem
                    .apps()
                    .map(|(_, a)| AppRate {
                        ue_id: a.ue_id.clone(),
                        app_id: a.app_id.clone(),
                        rate: 0.0,
                    })
                    .collect();
                (zeros, 0.0)
            }
            Err(e) => {
                log::error!(
                    "solver failed at epoch {}: {e}; keeping previous rates",
                    self.epoch
                );
                return Outcome::SolverFailed(e);
            }
        };
        self.epoch += 1;
        let record = EpochRecord {
            epoch: self.epoch,
            shadow_price,
            rates,
        };
        let messages = messages_for(&record);
        self.last = Some(record);
        Outcome::Dispatched(messages)
    }

    fn check(&self, profile: &UserProfile) -> Result<(), SolverError> {
        profile.validate()?;
        for other in self.registry.values().filter(|u| u.ue_id != profile.ue_id) {
            for app in &profile.apps {
                if other.apps.iter().any(|a| a.app_id == app.app_id) {
                    return Err(SolverError::Invalid {
                        field: format!("users.{}.apps.{}", profile.ue_id, app.app_id),
                        reason: format!("app_id already registered by {}", other.ue_id),
                    });
                }
            }
        }
        let mut seen = Vec::new();
        for app in &profile.apps {
            if seen.contains(&&app.app_id) {
                return Err(SolverError::Invalid {
                    field: format!("users.{}.apps.{}", profile.ue_id, app.app_id),
                    reason: "duplicate app_id".into(),
                });
            }
            seen.push(&app.app_id);
        }
        Ok(())
    }
}

/// Groups an epoch's rates into one message per UE, in registry order.
fn messages_for(record: &EpochRecord) -> Vec<RateMessage> {
    let mut by_ue: BTreeMap<&UeId, Vec<AppAllocation>> = BTreeMap::new();
    for r in &record.rates {
        by_ue.entry(&r.ue_id).or_default().push(AppAllocation {
            app_id: r.app_id.clone(),
            rate: r.rate,
        });
    }
    by_ue
        .into_iter()
        .map(|(ue, apps)| RateMessage {
            ue_id: ue.clone(),
            epoch: record.epoch,
            shadow_price: record.shadow_price,
            apps,
        })
        .collect()
}

/// Maps a validation error to a wire rejection: the field relative to the UE
/// and a short reason code.
fn rejection(ue: &UeId, err: SolverError) -> Rejection {
    let (field, reason) = match &err {
        SolverError::Invalid { field, reason } => {
            let prefix = format!("users.{ue}.");
            let field = field.strip_prefix(&prefix).unwrap_or(field).to_owned();
            let code = if reason.contains("sum to 1") {
                "alpha_sum"
            } else if reason.starts_with("duplicate") {
                "duplicate"
            } else if reason.contains("already registered") {
                "app_conflict"
            } else {
                "out_of_range"
            };
            (field, code)
        }
        _ => ("message".to_owned(), "invalid"),
    };
    log::warn!("rejecting registration from {ue}: {err}");
    Rejection {
        ue_id: ue.clone(),
        field,
        reason: reason.to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::wire::AppParams;
    use super::*;
    use crate::utility::UtilityFunction;

    fn app(id: &str, utility: UtilityFunction, alpha: f64) -> AppParams {
        AppParams {
            app_id: AppId::new(id).unwrap(),
            utility,
            alpha,
            rate_cap: None,
        }
    }

    fn reg(ue: &str, apps: Vec<AppParams>) -> RegisterMessage {
        RegisterMessage {
            ue_id: UeId::new(ue).unwrap(),
            beta: 1.0,
            apps,
        }
    }

    fn video(alpha: f64) -> RegisterMessage {
        reg(
            "ue1",
            vec![app("yt1", UtilityFunction::sigmoidal(0.148, 470.0), alpha)],
        )
    }

    fn http(alpha: f64) -> RegisterMessage {
        reg(
            "ue2",
            vec![app(
                "http1",
                UtilityFunction::logarithmic(17.0, 1000.0),
                alpha,
            )],
        )
    }

    fn dispatched(o: Outcome) -> Vec<RateMessage> {
        match o {
            Outcome::Dispatched(m) => m,
            other => panic!("expected dispatch, got {other:?}"),
        }
    }

    #[test]
    fn first_registration_allocates_its_apps() {
        let mut b = BrokerState::new(1000.0, 1e-4).unwrap();
        let msgs = dispatched(b.handle_register(&video(1.0)).unwrap());
        assert_eq!(b.registry().len(), 1);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].epoch, 1);
        assert_eq!(msgs[0].apps.len(), 1);
        assert!(msgs[0].apps[0].rate > 0.0);
    }

    #[test]
    fn two_ue_epoch_equals_offline_solve() {
        let mut b = BrokerState::new(1000.0, 1e-4).unwrap();
        b.handle_register(&video(1.0)).unwrap();
        let msgs = dispatched(b.handle_register(&http(1.0)).unwrap());
        assert_eq!(msgs.len(), 2);
        let offline = solver::solve(&AllocationProblem {
            users: b.registry().values().cloned().collect(),
            capacity: 1000.0,
            tolerance: 1e-4,
        })
        .unwrap();
        for m in &msgs {
            assert_eq!(m.epoch, 2);
            assert_eq!(m.shadow_price, offline.shadow_price);
            for a in &m.apps {
                assert_eq!(Some(a.rate), offline.rate(&a.app_id));
            }
        }
        let total: f64 = msgs.iter().flat_map(|m| &m.apps).map(|a| a.rate).sum();
        assert!(total <= 1000.0 + 1e-4);
    }

    #[test]
    fn re_registration_updates_in_place() {
        let mut b = BrokerState::new(1000.0, 1e-4).unwrap();
        b.handle_register(&video(1.0)).unwrap();
        b.handle_register(&http(1.0)).unwrap();
        let before = b.rate(&AppId::new("http1").unwrap()).unwrap();
        let msgs = dispatched(b.handle_register(&video(0.0)).unwrap());
        assert_eq!(b.registry().len(), 2);
        assert_eq!(msgs[0].epoch, 3);
        let after = b.rate(&AppId::new("http1").unwrap()).unwrap();
        assert!(after > before);
        assert!((after - 1000.0).abs() <= 1e-4, "{after}");
        assert_eq!(b.rate(&AppId::new("yt1").unwrap()), Some(0.0));
    }

    #[test]
    fn bad_alpha_sum_is_rejected_without_epoch() {
        let mut b = BrokerState::new(1000.0, 1e-4).unwrap();
        b.handle_register(&video(1.0)).unwrap();
        let bad = reg(
            "ue2",
            vec![
                app("h1", UtilityFunction::logarithmic(17.0, 1000.0), 0.75),
                app("h2", UtilityFunction::logarithmic(17.0, 1000.0), 0.75),
            ],
        );
        let rej = b.handle_register(&bad).unwrap_err();
        assert_eq!(rej.field, "alpha");
        assert_eq!(rej.reason, "alpha_sum");
        assert_eq!(b.epoch(), 1);
        assert_eq!(b.registry().len(), 1);
    }

    #[test]
    fn app_ids_are_unique_across_ues() {
        let mut b = BrokerState::new(1000.0, 1e-4).unwrap();
        b.handle_register(&video(1.0)).unwrap();
        let clash = reg(
            "ue2",
            vec![app("yt1", UtilityFunction::logarithmic(17.0, 1000.0), 1.0)],
        );
        let rej = b.handle_register(&clash).unwrap_err();
        assert_eq!(rej.reason, "app_conflict");
        assert_eq!(rej.field, "apps.yt1");
    }

    #[test]
    fn all_idle_dispatches_zeros() {
        let mut b = BrokerState::new(1000.0, 1e-4).unwrap();
        b.handle_register(&video(0.0)).unwrap();
        let msgs = dispatched(b.handle_register(&http(0.0)).unwrap());
        assert_eq!(msgs.len(), 2);
        for m in msgs {
            assert_eq!(m.shadow_price, 0.0);
            assert!(m.apps.iter().all(|a| a.rate == 0.0));
        }
    }

    #[test]
    fn departed_ue_is_excluded() {
        let mut b = BrokerState::new(1000.0, 1e-4).unwrap();
        b.handle_register(&video(1.0)).unwrap();
        b.handle_register(&http(1.0)).unwrap();
        let msgs = dispatched(b.handle_depart(&UeId::new("ue1").unwrap()).unwrap());
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].ue_id.as_str(), "ue2");
        assert!(b.rate(&AppId::new("yt1").unwrap()).is_none());
        assert!(b.handle_depart(&UeId::new("ghost").unwrap()).is_none());
        assert_eq!(
            b.handle_depart(&UeId::new("ue2").unwrap()),
            Some(Outcome::Empty)
        );
    }

    #[test]
    fn epoch_log_rows() {
        let record = EpochRecord {
            epoch: 4,
            shadow_price: 0.00025,
            rates: vec![AppRate {
                ue_id: UeId::new("ue1").unwrap(),
                app_id: AppId::new("yt1").unwrap(),
                rate: 514.0,
            }],
        };
        let mut out = Vec::new();
        record.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "4,0.000250000000,ue1,yt1,514.000000\n"
        );
    }
}
