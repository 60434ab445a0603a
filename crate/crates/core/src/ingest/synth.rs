//! Synthetic desk-scale dataset generator.
//!
//! Benign background comes from a small template library: daemons that
//! reread their config and append to their log, a periodic NTP beacon, a
//! backup daemon (the only benign sender), and worker sessions forked off
//! cron that read shared libraries, talk to one internal service, and spool
//! a temp file. Every benign (src, dst) pair sticks to a single operation,
//! so an edge-type model can learn the background cold.
//!
//! Each attack chain follows the classic intrusion shape over four fresh
//! entities: inbound C2 connect, implant execution, sensitive-file read,
//! exfiltration send. Three of those interactions violate background
//! regularities (a wrong-direction connect, an operation the background
//! never uses, a send from a non-backup subject), which is what gives the
//! chains a detectable signature without making them trivially loud.
//!
//! Fresh session entities draw their attributes from fixed pools, so
//! test-split vocabulary stays in-vocabulary for embeddings trained on the
//! train split. Attack entities use strings that appear nowhere else.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{Attrs, Entity, EntityId, EntityKind, IngestError, OpType, ProvEvent, EVENTS_FILE, LABELS_FILE};

/// Start of every synthetic span (2023-11-14T22:13:20Z), in ns.
pub const BASE_TS: i64 = 1_700_000_000_000_000_000;

const NS_PER_SEC: i64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthParams {
    pub seed: u64,
    pub n_benign_events: u64,
    pub n_attack_chains: u32,
    pub span_hours: u32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { seed: 0, n_benign_events: 50_000, n_attack_chains: 2, span_hours: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthReport {
    pub events_written: u64,
    pub benign_events: u64,
    pub attack_events: u64,
    pub labeled_nodes: u64,
    pub span: (i64, i64),
    pub events_path: PathBuf,
    pub labels_path: PathBuf,
}

// ── Template library ─────────────────────────────────────────────────────

/// (path, cmd_line, conf path, log path); index 0 forks workers, index 1 is
/// the only benign sender, index 2 beacons.
const DAEMONS: [(&str, &str, &str, &str); 10] = [
    ("/usr/sbin/crond", "crond -n", "/etc/crontab", "/var/log/cron.log"),
    ("/usr/sbin/backupd", "backupd --daily", "/var/backup/manifest", "/var/log/backup.log"),
    ("/usr/sbin/ntpd", "ntpd -g", "/etc/ntp.conf", "/var/log/ntp.log"),
    ("/usr/sbin/sshd", "sshd -D", "/etc/ssh/sshd_config", "/var/log/auth.log"),
    ("/usr/sbin/nginx", "nginx -g daemon off;", "/etc/nginx/nginx.conf", "/var/log/nginx/access.log"),
    ("/usr/bin/postgres", "postgres -D /var/lib/pg", "/etc/postgresql/postgresql.conf", "/var/log/postgresql.log"),
    ("/usr/sbin/rsyslogd", "rsyslogd -n", "/etc/rsyslog.conf", "/var/log/syslog"),
    ("/usr/bin/dbus-daemon", "dbus-daemon --system", "/etc/dbus-1/system.conf", "/var/log/dbus.log"),
    ("/sbin/agetty", "agetty tty1", "/etc/issue", "/var/log/wtmp"),
    ("/usr/lib/systemd/systemd-journald", "systemd-journald", "/etc/systemd/journald.conf", "/var/log/journal.log"),
];
const CRON: usize = 0;
const BACKUPD: usize = 1;
const NTPD: usize = 2;

const LIB_PATHS: [&str; 8] = [
    "/usr/lib/libc.so.6",
    "/usr/lib/libssl.so.3",
    "/usr/lib/libcrypto.so.3",
    "/usr/lib/libz.so.1",
    "/usr/lib/libxml2.so.2",
    "/usr/lib/libpython3.11.so",
    "/usr/lib/libjvm.so",
    "/usr/lib/libuv.so.1",
];

const WORKER_ATTRS: [(&str, &str); 6] = [
    ("/usr/bin/python3", "python3 /opt/jobs/etl.py"),
    ("/usr/bin/python3", "python3 /opt/jobs/report.py"),
    ("/usr/bin/java", "java -jar /opt/apps/indexer.jar"),
    ("/usr/bin/node", "node /opt/svc/metrics.js"),
    ("/usr/bin/rsync", "rsync -a /data/in /data/out"),
    ("/usr/bin/make", "make -C /opt/build all"),
];

const TMP_PATHS: [&str; 6] = [
    "/tmp/job_etl.tmp",
    "/tmp/job_report.tmp",
    "/tmp/idx_cache.tmp",
    "/tmp/metrics_buf.tmp",
    "/tmp/rsync_part.tmp",
    "/tmp/build_dep.tmp",
];

const SERVICE_NETS: [(&str, &str); 6] = [
    ("10.0.1.5", "443"),
    ("10.0.1.6", "443"),
    ("10.0.2.7", "8080"),
    ("10.0.2.8", "8080"),
    ("10.0.3.9", "5432"),
    ("10.0.3.10", "5432"),
];

const BACKUP_NET: (&str, &str) = ("10.0.0.9", "873");
const NTP_NET: (&str, &str) = ("192.168.0.1", "123");

// ── Generator state ──────────────────────────────────────────────────────

struct Gen {
    rng: ChaCha12Rng,
    entities: Vec<Entity>,
    // (ts, emission order, op, src index, dst index)
    events: Vec<(i64, u64, OpType, usize, usize)>,
}

impl Gen {
    fn subject(&mut self, path: &str, cmd: &str) -> usize {
        self.alloc(EntityKind::Subject, Attrs {
            type_name: Some("process".into()),
            path: Some(path.into()),
            cmd_line: Some(cmd.into()),
            ..Attrs::default()
        })
    }

    fn file(&mut self, path: &str) -> usize {
        self.alloc(EntityKind::File, Attrs {
            type_name: Some("regular".into()),
            path: Some(path.into()),
            ..Attrs::default()
        })
    }

    fn netflow(&mut self, ip: &str, port: &str) -> usize {
        self.alloc(EntityKind::Netflow, Attrs {
            type_name: Some("socket".into()),
            remote_ip: Some(ip.into()),
            remote_port: Some(port.into()),
            ..Attrs::default()
        })
    }

    fn alloc(&mut self, kind: EntityKind, attrs: Attrs) -> usize {
        let id = EntityId(self.rng.gen::<u128>());
        self.entities.push(Entity { id, kind, attrs });
        self.entities.len() - 1
    }

    fn emit(&mut self, ts: i64, op: OpType, src: usize, dst: usize) {
        let seq = self.events.len() as u64;
        self.events.push((ts, seq, op, src, dst));
    }

    fn jitter(&mut self, max_ns: i64) -> i64 {
        self.rng.gen_range(0..max_ns)
    }
}

/// Generate `events.jsonl` and `labels.csv` under `out_dir`. Deterministic:
/// the same parameters always produce byte-identical files. The benign event
/// count is a target (activities come in fixed-size template units), the
/// label set is exact.
pub fn generate_synthetic(params: &SynthParams, out_dir: &Path) -> Result<SynthReport, IngestError> {
    if params.n_benign_events < 1000 {
        return Err(IngestError::BadParam {
            what: format!("n_benign_events must be at least 1000, got {}", params.n_benign_events),
        });
    }
    if params.span_hours < 1 {
        return Err(IngestError::BadParam { what: "span_hours must be at least 1".into() });
    }
    let span_ns = params.span_hours as i64 * 3600 * NS_PER_SEC;
    let chains = params.n_attack_chains as i64;
    if chains > 0 && span_ns / 3 < (chains + 1) * 120 * NS_PER_SEC {
        return Err(IngestError::BadParam {
            what: format!(
                "span of {}h cannot hold {} attack chains in its final third",
                params.span_hours, params.n_attack_chains
            ),
        });
    }

    let mut g = Gen {
        rng: ChaCha12Rng::seed_from_u64(params.seed),
        entities: Vec::new(),
        events: Vec::new(),
    };

    // Fixed cast: daemons with their config and log files, shared libraries,
    // and the two special netflows.
    let mut daemon_s = [0usize; 10];
    let mut daemon_conf = [0usize; 10];
    let mut daemon_log = [0usize; 10];
    for (i, (path, cmd, conf, log)) in DAEMONS.iter().enumerate() {
        daemon_s[i] = g.subject(path, cmd);
        daemon_conf[i] = g.file(conf);
        daemon_log[i] = g.file(log);
    }
    let libs: Vec<usize> = LIB_PATHS.iter().map(|p| g.file(p)).collect();
    let backup_net = g.netflow(BACKUP_NET.0, BACKUP_NET.1);
    let ntp_net = g.netflow(NTP_NET.0, NTP_NET.1);

    let span_start = BASE_TS;
    // Benign activity keeps a one-minute tail margin.
    let usable = span_ns - 60 * NS_PER_SEC;

    let n = params.n_benign_events;
    let n_sessions = (n * 65 / 100) / 8;
    let n_beacons = ((n * 4 / 100) / 2).max(2);
    let n_backups = ((n * 2 / 100) / 2).max(2);
    let used = n_sessions * 8 + n_beacons * 2 + n_backups * 2;
    let n_motifs = n.saturating_sub(used) / 2;

    // Worker sessions: fork, two library reads, one service round-trip, two
    // temp-file writes. Workers, their service flows, and their temp files
    // are fresh entities with pooled attributes.
    for _ in 0..n_sessions {
        let start = span_start + g.rng.gen_range(0..usable - 30 * NS_PER_SEC);
        let (wp, wc) = WORKER_ATTRS[g.rng.gen_range(0..WORKER_ATTRS.len())];
        let worker = g.subject(wp, wc);
        let (ip, port) = SERVICE_NETS[g.rng.gen_range(0..SERVICE_NETS.len())];
        let net = g.netflow(ip, port);
        let tmp_path = TMP_PATHS[g.rng.gen_range(0..TMP_PATHS.len())];
        let tmp = g.file(tmp_path);
        let lib_a = libs[g.rng.gen_range(0..libs.len())];
        let lib_b = libs[(libs.iter().position(|&l| l == lib_a).unwrap() + 1) % libs.len()];

        let mut ts = start;
        let mut step = |g: &mut Gen, op, src, dst| {
            g.emit(ts, op, src, dst);
            ts += 200_000_000 + g.jitter(2_800_000_000);
        };
        step(&mut g, OpType::Fork, daemon_s[CRON], worker);
        step(&mut g, OpType::Read, worker, lib_a);
        step(&mut g, OpType::Connect, worker, net);
        step(&mut g, OpType::Recv, net, worker);
        step(&mut g, OpType::Recv, net, worker);
        step(&mut g, OpType::Write, worker, tmp);
        step(&mut g, OpType::Write, worker, tmp);
        step(&mut g, OpType::Read, worker, lib_b);
    }

    // Periodic NTP beacon: outbound connect, inbound recv.
    let interval = usable / n_beacons as i64;
    for k in 0..n_beacons {
        let ts = span_start + k as i64 * interval + interval / 2 + g.jitter(2 * NS_PER_SEC);
        g.emit(ts, OpType::Connect, daemon_s[NTPD], ntp_net);
        let gap = 100_000_000 + g.jitter(400_000_000);
        g.emit(ts + gap, OpType::Recv, ntp_net, daemon_s[NTPD]);
    }

    // Backup runs: manifest read, then the background's only send.
    for _ in 0..n_backups {
        let ts = span_start + g.rng.gen_range(0..usable - 10 * NS_PER_SEC);
        g.emit(ts, OpType::Read, daemon_s[BACKUPD], daemon_conf[BACKUPD]);
        let gap = NS_PER_SEC + g.jitter(4 * NS_PER_SEC);
        g.emit(ts + gap, OpType::Send, daemon_s[BACKUPD], backup_net);
    }

    // Daemon heartbeat motifs: reread config, append to log.
    for m in 0..n_motifs {
        let d = (m % DAEMONS.len() as u64) as usize;
        let ts = span_start + g.rng.gen_range(0..usable - 10 * NS_PER_SEC);
        g.emit(ts, OpType::Read, daemon_s[d], daemon_conf[d]);
        let gap = 100_000_000 + g.jitter(900_000_000);
        g.emit(ts + gap, OpType::Write, daemon_s[d], daemon_log[d]);
    }

    let benign_events = g.events.len() as u64;

    // Attack chains, pinned to the final third of the span.
    let third_start = span_start + 2 * span_ns / 3;
    let slot = (span_ns / 3 - 60 * NS_PER_SEC) / (chains + 1).max(1);
    let mut labels: Vec<(EntityId, u32)> = Vec::new();
    for c in 0..params.n_attack_chains {
        let attack_id = c + 1;
        let c2 = g.netflow(&format!("203.0.113.{}", 10 + c), "9291");
        let implant = g.subject(
            &format!("/tmp/.cache/.kworker_{c}"),
            &format!("./kworker_{c} --mode beacon"),
        );
        let secret = g.file(&format!("/home/admin/secret/credentials_{c}.db"));
        let exfil = g.netflow(&format!("203.0.113.{}", 100 + c), "9999");
        for idx in [c2, implant, secret, exfil] {
            labels.push((g.entities[idx].id, attack_id));
        }

        let base = third_start + (c as i64 + 1) * slot;
        let j = g.jitter(2 * NS_PER_SEC);
        g.emit(base + j, OpType::Connect, c2, implant);
        g.emit(base + j + 7 * NS_PER_SEC, OpType::Execute, implant, secret);
        g.emit(base + j + 15 * NS_PER_SEC, OpType::Read, implant, secret);
        g.emit(base + j + 24 * NS_PER_SEC, OpType::Send, implant, exfil);
    }
    let attack_events = g.events.len() as u64 - benign_events;

    // Order by time (emission order breaks ties), then let positions become
    // event ids so the file itself is sorted.
    g.events.sort_by_key(|&(ts, seq, ..)| (ts, seq));

    std::fs::create_dir_all(out_dir)
        .map_err(|e| IngestError::Io { path: out_dir.to_path_buf(), source: e })?;
    let events_path = out_dir.join(EVENTS_FILE);
    let labels_path = out_dir.join(LABELS_FILE);

    {
        use std::io::Write as _;
        let file = std::fs::File::create(&events_path)
            .map_err(|e| IngestError::Io { path: events_path.clone(), source: e })?;
        let mut w = std::io::BufWriter::new(file);
        for (i, &(ts, _, op, src, dst)) in g.events.iter().enumerate() {
            let ev = ProvEvent {
                event_id: i as u64 + 1,
                ts,
                op,
                src: g.entities[src].clone(),
                dst: g.entities[dst].clone(),
            };
            let line = serde_json::to_string(&ev)
                .map_err(|e| IngestError::Serde { path: events_path.clone(), message: e.to_string() })?;
            writeln!(w, "{line}").map_err(|e| IngestError::Io { path: events_path.clone(), source: e })?;
        }
        w.flush().map_err(|e| IngestError::Io { path: events_path.clone(), source: e })?;
    }
    {
        use std::io::Write as _;
        let file = std::fs::File::create(&labels_path)
            .map_err(|e| IngestError::Io { path: labels_path.clone(), source: e })?;
        let mut w = std::io::BufWriter::new(file);
        for (id, attack_id) in &labels {
            writeln!(w, "{id},{attack_id}")
                .map_err(|e| IngestError::Io { path: labels_path.clone(), source: e })?;
        }
        w.flush().map_err(|e| IngestError::Io { path: labels_path.clone(), source: e })?;
    }

    Ok(SynthReport {
        events_written: g.events.len() as u64,
        benign_events,
        attack_events,
        labeled_nodes: labels.len() as u64,
        span: (span_start, span_start + span_ns),
        events_path,
        labels_path,
    })
}
