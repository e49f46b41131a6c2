//! Playback buffer of a streaming client.

use super::StreamingModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Filling the initial buffer; not counted as rebuffering.
    Startup,
    Playing,
    Stalled,
    /// All media downloaded and played.
    Finished,
}

/// Player state, advanced once per tick.
///
/// Within a tick, delivered media is added to the buffer first; playback
/// then consumes up to one tick of it. A stall begins when the buffer runs
/// dry with media still to download and ends once `rebuffer_threshold`
/// seconds are buffered. Phase changes take effect from the next tick.
#[derive(Debug, Clone)]
pub struct Player {
    model: StreamingModel,
    buffer: f64,
    downloaded: f64,
    phase: Phase,
    stalls: u32,
    stall_s: f64,
}

impl Player {
    pub fn new(model: StreamingModel) -> Self {
        Self {
            model,
            buffer: 0.0,
            downloaded: 0.0,
            phase: Phase::Startup,
            stalls: 0,
            stall_s: 0.0,
        }
    }

    pub fn model(&self) -> &StreamingModel {
        &self.model
    }

    /// Seconds of media buffered.
    pub fn buffer(&self) -> f64 {
        self.buffer
    }

    /// Kbit of media downloaded so far.
    pub fn downloaded(&self) -> f64 {
        self.downloaded
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn stalls(&self) -> u32 {
        self.stalls
    }

    pub fn stall_seconds(&self) -> f64 {
        self.stall_s
    }

    pub fn media_complete(&self) -> bool {
        media_complete(self.downloaded, &self.model)
    }

    /// Kbit the player would accept now, given `outstanding` kbit already
    /// requested but not delivered.
    pub fn wanted(&self, outstanding: f64, tick: f64) -> f64 {
        let m = &self.model;
        let window = m.pull_factor * m.bitrate * tick - outstanding;
        let room = (m.buffer_cap - self.buffer) * m.bitrate - outstanding;
        let remaining = m.total_kbit() - self.downloaded - outstanding;
        window.min(room).min(remaining).max(0.0)
    }

    /// True while the player still wants data: buffer plus outstanding below
    /// the cap, and media left to fetch.
    pub fn is_filling(&self, outstanding: f64) -> bool {
        let m = &self.model;
        self.buffer + outstanding / m.bitrate < m.buffer_cap
            && self.downloaded + outstanding < m.total_kbit() - completion_slack(m.total_kbit())
    }

    pub fn step(&mut self, delivered: f64, tick: f64) {
        self.downloaded += delivered;
        self.buffer += delivered / self.model.bitrate;
        let complete = self.media_complete();
        match self.phase {
            Phase::Startup => {
                if self.buffer >= self.model.startup_buffer || complete {
                    self.phase = Phase::Playing;
                }
            }
            Phase::Playing => {
                let play = tick.min(self.buffer);
                self.buffer -= play;
                if self.buffer <= 0.0 {
                    if complete {
                        self.phase = Phase::Finished;
                    } else {
                        self.phase = Phase::Stalled;
                        self.stalls += 1;
                        self.stall_s += tick - play;
                    }
                }
            }
            Phase::Stalled => {
                self.stall_s += tick;
                if self.buffer >= self.model.rebuffer_threshold || complete {
                    self.phase = Phase::Playing;
                }
            }
            Phase::Finished => {}
        }
    }
}

pub(crate) fn completion_slack(total: f64) -> f64 {
    1e-9 * total.max(1.0)
}

pub(crate) fn media_complete(downloaded: f64, model: &StreamingModel) -> bool {
    let total = model.total_kbit();
    downloaded >= total - completion_slack(total)
}
