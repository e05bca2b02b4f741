"""Shared helpers for tests that drive the command line as a user would."""

import signal
import socket
import subprocess
import sys
from contextlib import contextmanager


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@contextmanager
def background(*argv):
    """Run a long-lived subcommand (serve, relay) and yield its listening endpoint."""
    proc = subprocess.Popen([sys.executable, "-m", "emrtdlab", *argv], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        assert line, proc.stderr.read()
        words = line.split()
        # "listening on H:P" or "relaying H:P -> H:P"
        yield words[words.index("on") + 1] if "on" in words else words[1]
    finally:
        proc.send_signal(signal.SIGINT)
        try:
            proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
