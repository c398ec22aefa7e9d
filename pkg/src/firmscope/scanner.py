"""Site-map-restricted dynamic probing.

The built-in scanner only requests URLs from the site map, form actions
found on those pages that stay inside the served tree, and backup-file
variants of site-map entries. Command-injection payloads are fired blind:
whether they worked is decided later by the filesystem diff.
"""

from __future__ import annotations

import json
import logging
import posixpath
import re
import subprocess
import tempfile
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path
from urllib.parse import parse_qsl, unquote, urljoin, urlsplit, urlunsplit

import requests

from .collector import TranscriptRecorder
from .findings import Category, Finding, Locator, Source, load_jsonl
from .webheur import SiteMap

logger = logging.getLogger(__name__)

MARKER_HEX_RE = re.compile(r"[0-9a-f]{8,}")
INJECTION_DIR = "/tmp"
CMD_TEMPLATES = ("; touch {path}", "| touch {path}", "`touch {path}`", "$(touch {path})")
XSS_TOKEN = "<fsx{nonce}>"
XSS_CONTEXT = 40
CSRF_TOKEN_RE = re.compile(r"csrf|token|nonce|xsrf", re.I)
SENSITIVE_FIELD_RE = re.compile(r"pass|pwd|config|conf|admin|user", re.I)
ERROR_LEAK_RE = re.compile(
    r"Traceback \(most recent call last\)|Fatal error|Warning: |Exception|stack trace|"
    r"\bat line \d+|(?:/usr|/var|/www|/home|/tmp|/etc)/[\w.-]+/[\w./-]+",
    re.I,
)
BACKUP_SUFFIXES = ("~", ".bak")
DEFAULT_FIELD_VALUE = "1"


class ScanAborted(Exception):
    """The target stopped answering mid-scan."""


@dataclass
class ScanJob:
    base_url: str
    sitemap: SiteMap | list[str]
    injection_marker_prefix: str
    focus_paths: list[str] = field(default_factory=list)
    firmware_id: str = ""

    def __post_init__(self):
        if not self.urls:
            raise ValueError("scan job needs a non-empty site map")
        if not MARKER_HEX_RE.search(self.injection_marker_prefix):
            raise ValueError("marker prefix must carry at least 8 random hex characters")

    @property
    def urls(self) -> list[str]:
        return list(self.sitemap.urls if isinstance(self.sitemap, SiteMap) else self.sitemap)

    def to_dict(self) -> dict:
        return {
            "base_url": self.base_url,
            "sitemap": self.urls,
            "injection_marker_prefix": self.injection_marker_prefix,
            "focus_paths": list(self.focus_paths),
            "firmware_id": self.firmware_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanJob":
        return cls(d["base_url"], list(d["sitemap"]), d["injection_marker_prefix"],
                   list(d.get("focus_paths", [])), d.get("firmware_id", ""))


@dataclass
class Payload:
    nonce: str
    url: str
    method: str
    parameter: str
    value: str


@dataclass
class ScanResult:
    findings: list[Finding] = field(default_factory=list)
    payloads: list[Payload] = field(default_factory=list)
    requested: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def partial(self) -> bool:
        return self.error is not None


@dataclass
class FormInput:
    name: str
    type: str = "text"
    value: str = ""


@dataclass
class Form:
    action: str
    method: str
    inputs: list[FormInput] = field(default_factory=list)

    def hidden_names(self) -> list[str]:
        return [i.name for i in self.inputs if i.type == "hidden"]

    def has_token(self) -> bool:
        return any(CSRF_TOKEN_RE.search(n) for n in self.hidden_names())

    def state_changing(self) -> bool:
        if self.method == "POST":
            return True
        return any(i.type == "password" or SENSITIVE_FIELD_RE.search(i.name) for i in self.inputs)

    def fillable(self) -> list[FormInput]:
        return [i for i in self.inputs if i.type not in ("submit", "button", "image", "reset", "file")]


class _FormParser(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.forms: list[Form] = []
        self._current: Form | None = None

    def handle_starttag(self, tag, attrs):
        a = {k.lower(): (v or "") for k, v in attrs}
        if tag == "form":
            self._current = Form(a.get("action", ""), (a.get("method") or "GET").upper())
            self.forms.append(self._current)
        elif tag in ("input", "textarea", "select") and self._current is not None and a.get("name"):
            kind = a.get("type", "text").lower() if tag == "input" else tag
            self._current.inputs.append(FormInput(a["name"], kind, a.get("value", "")))

    def handle_endtag(self, tag):
        if tag == "form":
            self._current = None


def parse_forms(html_text: str) -> list[Form]:
    parser = _FormParser()
    try:
        parser.feed(html_text)
        parser.close()
    except Exception:  # malformed markup: keep whatever was parsed
        logger.debug("form parser gave up part-way", exc_info=True)
    return parser.forms


def probe_csrf(page_url: str, html_text: str, firmware_id: str = "") -> list[Finding]:
    """One CSRF finding per state-changing form without an anti-forgery token."""
    findings = []
    seen = set()
    for form in parse_forms(html_text):
        if not form.state_changing() or form.has_token():
            continue
        action = urlsplit(urljoin(page_url, form.action or page_url)).path
        key = (form.method, action)
        if key in seen:
            continue
        seen.add(key)
        names = ",".join(i.name for i in form.inputs) or "-"
        findings.append(Finding(
            Category.CSRF, Source.DYNAMIC, Locator(urlsplit(page_url).path, action),
            f"{form.method} form to {action} without anti-forgery token (fields: {names})", firmware_id))
    return findings


def xss_evidence(body: str, token: str) -> str | None:
    idx = body.find(token)
    if idx < 0:
        return None
    return body[max(0, idx - XSS_CONTEXT):idx + len(token) + XSS_CONTEXT]


def _header_values(resp: requests.Response, name: str) -> list[str]:
    raw = getattr(resp.raw, "headers", None)
    if raw is not None and hasattr(raw, "getlist"):
        values = raw.getlist(name)
        if values:
            return list(values)
    value = resp.headers.get(name)
    return [value] if value else []


def probe_low_severity(url: str, resp: requests.Response, firmware_id: str = "") -> list[Finding]:
    path = urlsplit(url).path
    out = []

    def add(cat: Category, evidence: str) -> None:
        out.append(Finding(cat, Source.DYNAMIC, Locator(path), evidence, firmware_id))

    for cookie in _header_values(resp, "Set-Cookie"):
        if "httponly" not in cookie.lower():
            add(Category.COOKIE_NO_HTTPONLY, f"Set-Cookie: {cookie}")
            break
    is_html = "html" in resp.headers.get("Content-Type", "").lower()
    if is_html and resp.status_code < 400:
        if "X-Content-Type-Options" not in resp.headers:
            add(Category.NO_X_CONTENT_TYPE_OPTIONS, "X-Content-Type-Options header missing")
        if "X-Frame-Options" not in resp.headers:
            add(Category.NO_X_FRAME_OPTIONS, "X-Frame-Options header missing")
    if resp.status_code >= 500:
        m = ERROR_LEAK_RE.search(resp.text)
        if m:
            add(Category.APP_ERROR_INFO, resp.text[max(0, m.start() - 40):m.end() + 40])
    return out


class BuiltinScanner:
    """Minimal scanner implementing the adapter contract in-process."""

    def __init__(self, recorder: TranscriptRecorder | None = None, timeout: float = 10.0,
                 http: requests.Session | None = None):
        self.recorder = recorder or TranscriptRecorder()
        self.timeout = timeout
        self.http = http or requests.Session()
        self.http.trust_env = False
        self._counter = 0

    # plumbing

    def _next_nonce(self) -> str:
        self._counter += 1
        return f"n{self._counter:05d}"

    def _send(self, method: str, url: str, result: ScanResult, params: dict | None = None,
              data: dict | None = None) -> requests.Response:
        req = requests.Request(method, url, params=params, data=data)
        prepared = self.http.prepare_request(req)
        result.requested.append(prepared.url)
        body = prepared.body
        try:
            resp = self.http.send(prepared, timeout=self.timeout, allow_redirects=False)
        except requests.RequestException as exc:
            self.recorder.record(method, prepared.url, dict(prepared.headers), body, None, {}, None)
            raise ScanAborted(f"{method} {prepared.url}: {exc}") from exc
        self.recorder.record(method, prepared.url, dict(prepared.headers), body, resp.status_code,
                             dict(resp.headers), resp.content)
        return resp

    def _inside(self, job: ScanJob, url: str) -> bool:
        base = urlsplit(job.base_url)
        target = urlsplit(url)
        if (target.scheme, target.netloc) != (base.scheme, base.netloc):
            return False
        norm = posixpath.normpath(unquote(target.path) or "/")
        return norm.startswith(posixpath.normpath(base.path or "/"))

    def _ordered_urls(self, job: ScanJob) -> list[str]:
        urls = job.urls
        if not job.focus_paths:
            return urls

        def focused(u: str) -> bool:
            rel = unquote(u).lstrip("/")
            return any(f == rel or f.endswith("/" + rel) or rel.endswith("/" + f.lstrip("/"))
                       for f in (p.lstrip("/") for p in job.focus_paths))

        return [u for u in urls if focused(u)] + [u for u in urls if not focused(u)]

    # the scan

    def scan(self, job: ScanJob) -> ScanResult:
        result = ScanResult()
        low_seen: set[tuple[str, str]] = set()
        targets: dict[tuple[str, str, str], dict[str, str]] = {}
        fid = job.firmware_id

        def keep_low(items: list[Finding]) -> None:
            for f in items:
                k = (f.category.value, f.locator.target)
                if k not in low_seen:
                    low_seen.add(k)
                    result.findings.append(f)

        try:
            for rel in self._ordered_urls(job):
                page_url = urljoin(job.base_url, rel.lstrip("/"))
                parts = urlsplit(page_url)
                resp = self._send("GET", page_url, result)
                keep_low(probe_low_severity(page_url, resp, fid))
                if parts.query:
                    fields = dict(parse_qsl(parts.query, keep_blank_values=True))
                    bare = urlunsplit(parts._replace(query=""))
                    for name in fields:
                        targets.setdefault(("GET", bare, name), fields)
                if "html" not in resp.headers.get("Content-Type", "text/html").lower():
                    continue
                text = resp.text
                result.findings.extend(probe_csrf(page_url, text, fid))
                for form in parse_forms(text):
                    action = urljoin(page_url, form.action or page_url).split("#", 1)[0]
                    if not self._inside(job, action):
                        continue
                    method = "POST" if form.method == "POST" else "GET"
                    if method == "GET":
                        action = urlunsplit(urlsplit(action)._replace(query=""))
                    fields = {i.name: (i.value or DEFAULT_FIELD_VALUE) for i in form.fillable()}
                    for inp in form.fillable():
                        if inp.type == "hidden":
                            continue
                        targets.setdefault((method, action, inp.name), fields)

            for (method, action, param), fields in targets.items():
                self._probe_xss(job, result, method, action, param, fields)
                self.probe_command_injection(job, result, method, action, param, fields)

            for rel in job.urls:
                page_url = urljoin(job.base_url, rel.lstrip("/"))
                for suffix in BACKUP_SUFFIXES:
                    resp = self._send("GET", page_url + suffix, result)
                    if resp.status_code == 200:
                        keep_low([Finding(Category.BACKUP_FILE, Source.DYNAMIC,
                                          Locator(urlsplit(page_url).path + suffix),
                                          f"backup copy answered HTTP 200 ({len(resp.content)} bytes)", fid)])
        except ScanAborted as exc:
            logger.warning("scan aborted: %s", exc)
            result.error = str(exc)
        return result

    def _submit(self, method: str, action: str, fields: dict[str, str], result: ScanResult):
        if method == "POST":
            return self._send("POST", action, result, data=fields)
        return self._send("GET", action, result, params=fields)

    def _probe_xss(self, job: ScanJob, result: ScanResult, method: str, action: str, param: str,
                   fields: dict[str, str]) -> None:
        token = XSS_TOKEN.format(nonce=self._next_nonce())
        resp = self._submit(method, action, {**fields, param: token}, result)
        evidence = xss_evidence(resp.text, token)
        if evidence is not None:
            result.findings.append(Finding(Category.XSS, Source.DYNAMIC, Locator(urlsplit(action).path, param),
                                           evidence, job.firmware_id))

    def probe_command_injection(self, job: ScanJob, result: ScanResult, method: str, action: str, param: str,
                                fields: dict[str, str]) -> list[Payload]:
        sent = []
        for template in CMD_TEMPLATES:
            nonce = job.injection_marker_prefix + self._next_nonce()
            value = template.format(path=f"{INJECTION_DIR}/{nonce}")
            payload = Payload(nonce, action, method, param, value)
            result.payloads.append(payload)
            sent.append(payload)
            self._submit(method, action, {**fields, param: value}, result)
        return sent


class ExternalScanner:
    """Adapter for an out-of-process scanner.

    The command receives two extra arguments: the job descriptor (JSON) and
    the path where it must write findings as JSON Lines.
    """

    def __init__(self, argv: list[str], timeout: float = 3600):
        self.argv = list(argv)
        self.timeout = timeout

    def scan(self, job: ScanJob) -> ScanResult:
        with tempfile.TemporaryDirectory(prefix="fscope-ext-") as tmp:
            job_path = Path(tmp) / "job.json"
            out_path = Path(tmp) / "findings.jsonl"
            job_path.write_text(json.dumps(job.to_dict()), "utf-8")
            try:
                proc = subprocess.run(self.argv + [str(job_path), str(out_path)], capture_output=True,
                                      timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                return ScanResult(error=f"external scanner failed: {exc}")
            findings = load_jsonl(out_path.read_text("utf-8")) if out_path.exists() else []
            for f in findings:
                f.source = Source.DYNAMIC
                f.firmware_id = f.firmware_id or job.firmware_id
                f.__post_init__()
            error = None if proc.returncode == 0 else f"external scanner exited {proc.returncode}"
            return ScanResult(findings=findings, error=error)


def run_scan(job: ScanJob, recorder: TranscriptRecorder | None = None, timeout: float = 10.0) -> ScanResult:
    return BuiltinScanner(recorder, timeout).scan(job)
