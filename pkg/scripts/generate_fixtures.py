#!/usr/bin/env python3
"""Generate the bundled fixture knowledge base, corpora, and reranker checkpoint.

Deterministic: reruns produce byte-identical files. The KB is a 14-tactic,
56-technique miniature whose cards use disjoint signature vocabulary per
technique, so the bag-of-words hash embedder can separate them. Corpus texts
are synthesized from those vocabularies with a seeded RNG, split 120/30/50,
and a reranker checkpoint is trained on the train split so bundled end-to-end
runs exercise the calibrated path rather than constant fallback.

Usage: python3 scripts/generate_fixtures.py [--outdir src/hattack/fixtures]
"""

from __future__ import annotations

import argparse
import json
import random
from pathlib import Path

from hattack.embedder import HashEmbedder
from hattack.index import build_index
from hattack.kb import (
    Hierarchy,
    LabeledExample,
    Tactic,
    Technique,
    compose_tactic_text,
    compose_technique_text,
    estimate_cooccurrence,
    hierarchy_to_dict,
    validate_hierarchy,
)
from hattack.reranker import (
    FeatureContext,
    LossWeights,
    RerankModel,
    TrainerConfig,
    attach_features,
    make_training_example,
    train_reranker,
)
from hattack.retrieval import RetrievalParams, retrieve_tactics, retrieve_techniques

DIMENSION = 384
HIDDEN = 32
SEED = 42

# tactic id, tactic name, theme words, then per technique:
# (technique id, technique name, signature words). Signature vocabularies are
# pairwise disjoint so hash-embedding cosine reflects the intended labels.
KB_TABLE = [
    ("TA0043", "Reconnaissance", ["reconnaissance", "surveying"], [
        ("T1595", "Active Scanning", ["scanning", "portscan", "probing", "sweeps", "banners"]),
        ("T1592", "Gather Victim Host Information", ["fingerprinting", "hostnames", "firmware", "osbuild"]),
        ("T1589", "Gather Victim Identity Information", ["identities", "staffers", "rosters", "orgchart"]),
        ("T1598", "Phishing for Information", ["pretexting", "questionnaire", "solicit", "surveys"]),
    ]),
    ("TA0042", "Resource Development", ["provisioning", "staging"], [
        ("T1583", "Acquire Infrastructure", ["registrars", "domains", "vps", "leased"]),
        ("T1587", "Develop Capabilities", ["toolsmith", "compiling", "selfsigned", "builder"]),
        ("T1585", "Establish Accounts", ["personas", "sockpuppet", "profiles", "aliases"]),
        ("T1588", "Obtain Capabilities", ["purchasing", "marketplace", "licenses", "exploitkit"]),
    ]),
    ("TA0001", "Initial Access", ["intrusion", "entry"], [
        ("T1566", "Phishing", ["spearphishing", "lure", "attachment", "mailbox"]),
        ("T1190", "Exploit Public-Facing Application", ["webshell", "unpatched", "internetfacing", "webapp"]),
        ("T1133", "External Remote Services", ["vpn", "citrix", "remoteportal", "exposedgateway"]),
        ("T1078", "Valid Accounts", ["stolen", "logons", "reused", "legitimate"]),
    ]),
    ("TA0002", "Execution", ["execution", "launching"], [
        ("T1059", "Command and Scripting Interpreter", ["powershell", "bash", "cmdline", "interpreter"]),
        ("T1204", "User Execution", ["doubleclick", "enablemacros", "usertriggered", "openeddoc"]),
        ("T1053", "Scheduled Task/Job", ["schtasks", "cron", "timers", "jobqueue"]),
        ("T1047", "Windows Management Instrumentation", ["wmi", "wmic", "winmgmt", "processcall"]),
    ]),
    ("TA0003", "Persistence", ["persistence", "foothold"], [
        ("T1547", "Boot or Logon Autostart Execution", ["runkey", "autostart", "bootup", "logonitem"]),
        ("T1136", "Create Account", ["newaccount", "localuser", "backdooruser", "hiddenadmin"]),
        ("T1543", "Create or Modify System Process", ["servicebinary", "daemon", "systemd", "newservice"]),
        ("T1574", "Hijack Execution Flow", ["dllhijack", "sideloading", "searchorder", "plantedlibrary"]),
    ]),
    ("TA0004", "Privilege Escalation", ["escalation", "elevated"], [
        ("T1548", "Abuse Elevation Control Mechanism", ["uac", "sudo", "setuid", "bypassprompt"]),
        ("T1055", "Process Injection", ["injection", "hollowing", "remotethread", "shellcode"]),
        ("T1068", "Exploitation for Privilege Escalation", ["kernelexploit", "localprivilege", "driverflaw", "patchgap"]),
        ("T1134", "Access Token Manipulation", ["tokentheft", "impersonation", "seimpersonate", "duplicatedtoken"]),
    ]),
    ("TA0005", "Defense Evasion", ["evasion", "stealth"], [
        ("T1070", "Indicator Removal", ["wiped", "eventlogs", "clearing", "timestomp"]),
        ("T1027", "Obfuscated Files or Information", ["obfuscated", "packed", "base64", "encodedblob"]),
        ("T1562", "Impair Defenses", ["disabledav", "tamper", "firewallrules", "sensorsoff"]),
        ("T1036", "Masquerading", ["masquerading", "renamed", "lookalike", "spoofedname"]),
    ]),
    ("TA0006", "Credential Access", ["credential", "harvesting"], [
        ("T1110", "Brute Force", ["bruteforce", "passwordspray", "guessing", "lockouts"]),
        ("T1003", "OS Credential Dumping", ["lsass", "mimikatz", "samhive", "ntds"]),
        ("T1555", "Credentials from Password Stores", ["keychain", "vault", "browserstore", "savedpasswords"]),
        ("T1056", "Input Capture", ["keylogger", "keystrokes", "inputhook", "capturedtyping"]),
    ]),
    ("TA0007", "Discovery", ["discovery", "enumeration"], [
        ("T1082", "System Information Discovery", ["systeminfo", "buildnumber", "locale", "osdetails"]),
        ("T1057", "Process Discovery", ["tasklist", "runningprocesses", "pslist", "procenum"]),
        ("T1083", "File and Directory Discovery", ["dirlisting", "treewalk", "foldercontents", "filesearch"]),
        ("T1018", "Remote System Discovery", ["netview", "pingsweep", "arpcache", "neighborhosts"]),
    ]),
    ("TA0008", "Lateral Movement", ["lateral", "pivoting"], [
        ("T1021", "Remote Services", ["rdp", "ssh", "smbsession", "winrm"]),
        ("T1080", "Taint Shared Content", ["sharedrive", "poisoned", "netlogonshare", "seededfiles"]),
        ("T1550", "Use Alternate Authentication Material", ["passthehash", "goldenticket", "forgedkerberos", "stolencookie"]),
        ("T1570", "Lateral Tool Transfer", ["toolpush", "admin$", "internalcopy", "hosttohost"]),
    ]),
    ("TA0009", "Collection", ["collection", "gathering"], [
        ("T1560", "Archive Collected Data", ["archived", "rarred", "zipped", "splitarchive"]),
        ("T1005", "Data from Local System", ["localfiles", "documents", "desktopfiles", "harvestdocs"]),
        ("T1114", "Email Collection", ["inboxrules", "mailexport", "owa", "pstfiles"]),
        ("T1113", "Screen Capture", ["screenshot", "screengrab", "displaycapture", "capturedscreen"]),
    ]),
    ("TA0011", "Command and Control", ["commandchannel", "beaconing"], [
        ("T1071", "Application Layer Protocol", ["https", "dnsqueries", "webtraffic", "useragent"]),
        ("T1105", "Ingress Tool Transfer", ["payloadfetch", "stagedownload", "curl", "droppedbinary"]),
        ("T1573", "Encrypted Channel", ["tls", "encryptedchannel", "customcipher", "sessionkeys"]),
        ("T1090", "Proxy", ["proxychain", "relay", "socks", "hops"]),
    ]),
    ("TA0010", "Exfiltration", ["exfiltration", "smuggling"], [
        ("T1041", "Exfiltration Over C2 Channel", ["channelupload", "beaconupload", "implantupload", "c2exfil"]),
        ("T1048", "Exfiltration Over Alternative Protocol", ["dnstunnel", "icmptunnel", "ftpupload", "altprotocol"]),
        ("T1567", "Exfiltration Over Web Service", ["cloudupload", "pastesite", "webdrive", "filesharing"]),
        ("T1029", "Scheduled Transfer", ["timedupload", "nightly", "batchedtransfer", "exfilwindow"]),
    ]),
    ("TA0040", "Impact", ["impact", "disruption"], [
        ("T1486", "Data Encrypted for Impact", ["ransomware", "encryptedfiles", "ransomnote", "extortion"]),
        ("T1489", "Service Stop", ["stoppedservices", "haltdatabase", "killprocesses", "shutdownapps"]),
        ("T1490", "Inhibit System Recovery", ["shadowcopies", "vssadmin", "recoveryoff", "bootrepair"]),
        ("T1498", "Network Denial of Service", ["ddos", "floodtraffic", "amplification", "saturation"]),
    ]),
]

OPENERS = [
    "analysts observed the actor",
    "incident responders traced activity where the intruders",
    "telemetry from the estate showed operators",
    "the campaign report describes adversaries",
    "during triage the team confirmed the group",
    "forensic review established that attackers",
    "threat hunters flagged a host where the operator",
    "the intrusion summary notes the crew",
]

CONNECTORS = [
    "and later", "before they", "followed by operators who",
    "while a second stage", "and in parallel the actor",
]

CLOSERS = [
    "across several workstations", "on the victim network",
    "against the production segment", "targeting finance hosts",
    "during the second week", "with minimal tooling noise",
]


def build_hierarchy() -> Hierarchy:
    # Tactic cards carry every child signature word and almost no boilerplate:
    # shared filler across cards is pure noise for bag-of-words cosine.
    tactics = []
    techniques = []
    for tactic_id, tactic_name, theme, rows in KB_TABLE:
        child_sigs = [sig for _, _, sigs in rows for sig in sigs]
        tactics.append(Tactic(
            id=tactic_id,
            name=tactic_name,
            description=f"{theme[0]} {theme[1]} operations",
            keywords=tuple(theme + child_sigs),
            behaviors=(),
        ))
        for tech_id, tech_name, sigs in rows:
            techniques.append(Technique(
                id=tech_id,
                name=tech_name,
                tactic=tactic_id,
                description=f"adversaries perform {' '.join(sigs)} operations",
                examples=(f"{sigs[0]} {sigs[1]} observed in campaign",),
                detection=(f"hunt for {sigs[2]} {sigs[-1]}",),
            ))
    return Hierarchy.build(tactics, techniques)


def sample_example(rng: random.Random, index: int) -> LabeledExample:
    n_tactics = 1 if rng.random() < 0.7 else 2
    chosen_tactics = rng.sample(KB_TABLE, n_tactics)
    truths = []
    phrases = []
    for tactic_id, _, theme, rows in chosen_tactics:
        n_techs = 1 if (n_tactics == 2 or rng.random() < 0.45) else 2
        for tech_id, _, sigs in rng.sample(rows, n_techs):
            truths.append(tech_id)
            words = rng.sample(sigs, 3)
            phrases.append(f"used {words[0]} with {words[1]} and {words[2]}"
                           f" consistent with {theme[0]}")
    parts = [rng.choice(OPENERS)]
    for i, phrase in enumerate(phrases):
        if i:
            parts.append(rng.choice(CONNECTORS))
        parts.append(phrase)
    parts.append(rng.choice(CLOSERS))
    return LabeledExample(id=f"ex-{index:04d}", text=" ".join(parts),
                          techniques=tuple(sorted(set(truths))))


def write_corpus(path: Path, examples: list[LabeledExample]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for ex in examples:
            handle.write(json.dumps({"id": ex.id, "text": ex.text,
                                     "techniques": list(ex.techniques)}) + "\n")


def train_checkpoint(h: Hierarchy, train: list[LabeledExample],
                     val: list[LabeledExample]) -> tuple[RerankModel, dict]:
    embedder = HashEmbedder(dimension=DIMENSION)
    tactic_index = build_index(
        [embedder.embed(compose_tactic_text(t), id=t.id) for t in h.tactics])
    technique_index = build_index(
        [embedder.embed(compose_technique_text(t), id=t.id) for t in h.techniques],
        partition=h.child_index)
    prior = estimate_cooccurrence(h, train)
    params = RetrievalParams()

    def prepare(corpus):
        examples, missed = [], 0
        for item in corpus:
            query = embedder.embed(item.text, id=item.id)
            tactics = retrieve_tactics(query, tactic_index, params.M)
            cands = retrieve_techniques(query, tactics, technique_index, prior, params)
            ctx = FeatureContext.for_query(query, tactic_index, technique_index, prior)
            attach_features(cands, ctx)
            example = make_training_example(cands, set(item.techniques))
            missed += example.truth_rows.size == 0
            examples.append(example)
        return examples, missed

    train_examples, train_missed = prepare(train)
    val_examples, val_missed = prepare(val)
    model = RerankModel.initialize(dimension=DIMENSION, hidden=HIDDEN, seed=SEED)
    trained, log = train_reranker(
        model, train_examples, val_examples,
        TrainerConfig(max_epochs=2000, seed=SEED), LossWeights())
    stats = {
        "epochs": len(log),
        "best_val": min(e.val_loss for e in log),
        "first_val": log[0].val_loss,
        "train_missed": train_missed,
        "val_missed": val_missed,
    }
    return trained, stats


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--outdir", default="src/hattack/fixtures")
    args = parser.parse_args()
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    h = build_hierarchy()
    violations = validate_hierarchy(h)
    if violations:
        raise SystemExit("fixture hierarchy invalid: " + "; ".join(violations))

    # Disjoint signature vocabulary is what makes retrieval separable; refuse
    # to emit fixtures if an edit broke it.
    seen: dict[str, str] = {}
    for _, _, _, rows in KB_TABLE:
        for tech_id, _, sigs in rows:
            for sig in sigs:
                if sig in seen:
                    raise SystemExit(f"signature word {sig!r} reused by {seen[sig]} and {tech_id}")
                seen[sig] = tech_id

    rng = random.Random(SEED)
    examples = [sample_example(rng, i) for i in range(200)]
    train, val, test = examples[:120], examples[120:150], examples[150:]

    (outdir / "mini_attack.json").write_text(
        json.dumps(hierarchy_to_dict(h), indent=1), encoding="utf-8")
    write_corpus(outdir / "corpus_train.jsonl", train)
    write_corpus(outdir / "corpus_val.jsonl", val)
    write_corpus(outdir / "corpus_test.jsonl", test)

    trained, stats = train_checkpoint(h, train, val)
    trained.save(outdir / "reranker_mini.json")

    print(f"wrote fixtures to {outdir}")
    print(f"  tactics={len(h.tactics)} techniques={len(h.techniques)}")
    print(f"  corpora: train={len(train)} val={len(val)} test={len(test)}")
    print(f"  trainer: {stats}")
    print(f"  test-corpus diagnostics: {diagnose(h, train, test, trained)}")


def diagnose(h: Hierarchy, train: list[LabeledExample], test: list[LabeledExample],
             model: RerankModel) -> dict:
    """Fallback rate and confidence level the bundled checkpoint achieves."""
    from hattack.reranker import calibrate

    embedder = HashEmbedder(dimension=DIMENSION)
    tactic_index = build_index(
        [embedder.embed(compose_tactic_text(t), id=t.id) for t in h.tactics])
    technique_index = build_index(
        [embedder.embed(compose_technique_text(t), id=t.id) for t in h.techniques],
        partition=h.child_index)
    prior = estimate_cooccurrence(h, train)
    params = RetrievalParams()
    fallbacks = 0
    max_confs = []
    for item in test:
        query = embedder.embed(item.text, id=item.id)
        tactics = retrieve_tactics(query, tactic_index, params.M)
        cands = retrieve_techniques(query, tactics, technique_index, prior, params)
        ctx = FeatureContext.for_query(query, tactic_index, technique_index, prior)
        attach_features(cands, ctx)
        calibrate(cands, model)
        top = max(c.confidence for c in cands.technique_candidates)
        max_confs.append(top)
        fallbacks += top < params.theta
    return {"fallback_rate": fallbacks / len(test),
            "mean_max_confidence": round(sum(max_confs) / len(max_confs), 4)}


if __name__ == "__main__":
    main()
