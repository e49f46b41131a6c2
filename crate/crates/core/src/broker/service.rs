//! TCP front end for [`BrokerState`].
//!
//! One thread per connection. Every inbound message is handled under a single
//! mutex: the registry mutation, the solve, the epoch-log append and the
//! rate fan-out all happen before the next message is looked at. A connection
//! closing departs every UE that registered over it.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;

use super::wire::{self, Message, Rejection};
use super::{BrokerState, Outcome, EPOCH_LOG_HEADER};
use crate::ids::UeId;

type ConnId = u64;

struct Session {
    conn: ConnId,
    stream: TcpStream,
}

struct Shared {
    broker: BrokerState,
    sessions: HashMap<UeId, Session>,
    log: Option<Box<dyn Write + Send>>,
    next_conn: ConnId,
}

/// A broker that can be driven over TCP.
#[derive(Clone)]
pub struct Service {
    shared: Arc<Mutex<Shared>>,
}

impl Service {
    /// Wraps `broker`. If `epoch_log` is given, the CSV header is written now
    /// and every dispatched epoch is appended and flushed.
    pub fn new(broker: BrokerState, epoch_log: Option<Box<dyn Write + Send>>) -> io::Result<Self> {
        let mut log = epoch_log;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{EPOCH_LOG_HEADER}")?;
            w.flush()?;
        }
        Ok(Self {
            shared: Arc::new(Mutex::new(Shared {
                broker,
                sessions: HashMap::new(),
                log,
                next_conn: 0,
            })),
        })
    }

    /// Current epoch counter.
    pub fn epoch(&self) -> u64 {
        self.lock().broker.epoch()
    }

    /// Accepts connections until the listener fails.
    pub fn serve(&self, listener: TcpListener) -> io::Result<()> {
        for stream in listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let this = self.clone();
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = this.session(stream) {
                    log::warn!("session {peer:?} ended with error: {e}");
                }
            });
        }
        Ok(())
    }

    fn lock(&self) -> MutexGuard<'_, Shared> {
        // a panicking session must not take the broker down with it
        self.shared.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn session(&self, stream: TcpStream) -> io::Result<()> {
        let conn = {
            let mut s = self.lock();
            s.next_conn += 1;
            s.next_conn
        };
        let mut reply = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line);
            if !matches!(n, Ok(k) if k > 0) {
                self.disconnect(conn);
                return n.map(|_| ());
            }
            let msg = match wire::decode(&line) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("undecodable frame from connection {conn}: {e}");
                    let field = match &e {
                        wire::WireError::Missing(f) => (*f).to_owned(),
                        wire::WireError::Malformed { field, .. } => field.clone(),
                        wire::WireError::AppCount { .. } => "apps".to_owned(),
                        _ => "frame".to_owned(),
                    };
                    let rej = Rejection {
                        ue_id: UeId::new("-").expect("valid id"),
                        field,
                        reason: "malformed".into(),
                    };
                    reply.write_all(wire::encode(&Message::Reject(rej)).as_bytes())?;
                    continue;
                }
            };
            self.dispatch(conn, &reply, msg)?;
        }
    }

    fn dispatch(&self, conn: ConnId, reply: &TcpStream, msg: Message) -> io::Result<()> {
        let mut guard = self.lock();
        let s = &mut *guard;
        match msg {
            Message::Register(reg) => match s.broker.handle_register(&reg) {
                Ok(outcome) => {
                    s.sessions.insert(
                        reg.ue_id.clone(),
                        Session {
                            conn,
                            stream: reply.try_clone()?,
                        },
                    );
                    let ack = Message::Ack {
                        ue_id: reg.ue_id,
                        epoch: s.broker.epoch(),
                    };
                    (&*reply).write_all(wire::encode(&ack).as_bytes())?;
                    s.publish(outcome);
                }
                Err(rej) => {
                    (&*reply).write_all(wire::encode(&Message::Reject(rej)).as_bytes())?;
                }
            },
            Message::Depart { ue_id } => {
                let owned = s.sessions.get(&ue_id).is_some_and(|x| x.conn == conn);
                if owned {
                    s.sessions.remove(&ue_id);
                    if let Some(outcome) = s.broker.handle_depart(&ue_id) {
                        s.publish(outcome);
                    }
                }
                let ack = Message::Ack {
                    ue_id,
                    epoch: s.broker.epoch(),
                };
                (&*reply).write_all(wire::encode(&ack).as_bytes())?;
            }
            other => {
                log::debug!("ignoring unsolicited {other:?} from connection {conn}");
            }
        }
        Ok(())
    }

    fn disconnect(&self, conn: ConnId) {
        let mut guard = self.lock();
        let s = &mut *guard;
        let gone: Vec<UeId> = s
            .sessions
            .iter()
            .filter(|(_, x)| x.conn == conn)
            .map(|(ue, _)| ue.clone())
            .collect();
        for ue in gone {
            s.sessions.remove(&ue);
            log::info!("{ue} disconnected");
            if let Some(outcome) = s.broker.handle_depart(&ue) {
                s.publish(outcome);
            }
        }
    }
}

impl Shared {
    fn publish(&mut self, outcome: Outcome) {
        let Outcome::Dispatched(messages) = outcome else {
            return;
        };
        if let (Some(w), Some(record)) = (self.log.as_mut(), self.broker.last_epoch()) {
            if let Err(e) = record.write_csv(&mut *w).and_then(|_| w.flush()) {
                log::error!("epoch log write failed: {e}");
            }
        }
        for m in messages {
            let Some(session) = self.sessions.get(&m.ue_id) else {
                continue;
            };
            let frame = wire::encode(&Message::Rate(m));
            if let Err(e) = (&session.stream).write_all(frame.as_bytes()) {
                log::warn!("could not deliver rates: {e}");
            }
        }
    }
}
