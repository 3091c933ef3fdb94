import os
import json
from datetime import datetime

class Logger:
    """
    Appends lines to a log file, each tagged with the id of the process
        that wrote it. `record` writes one JSON object per line, so a log
        file can be read back with `read_records`.
    """
    def __init__(self, logfile = 'output.log', pid = 0):
        self.is_void = False
        self.logfile = logfile
        self.pid = pid

    def _write(self, line):
        with open(self.logfile, 'a', encoding = 'utf-8') as f:
            f.write(line + '\n')

    def log(self, string, timestamp = False):
        log_string = f'[{datetime.now()}] {string}' if timestamp else str(string)
        pid = self.pid if self.pid else 'LOGPARENT'
        self._write(f'[[{pid}]] {log_string}')
        return

    def record(self, **fields):
        """
        Write a structured record (one JSON line). Keys are sorted so
            identical records serialize identically.
        """
        self._write(json.dumps(fields, sort_keys = True, default = _jsonable))
        return

    def sublogger(self, pid = None):
        if pid is None:
            pid = os.getpid()
        self.log(f'Spawned sublogger for pid {pid}', timestamp = True)
        if self.is_void:
            return VoidLogger()
        return Logger(logfile = self.logfile, pid = pid)

class VoidLogger(Logger):
    def __init__(self):
        Logger.__init__(self)
        self.is_void = True

    def log(self, string, timestamp = False):
        return

    def record(self, **fields):
        return

class JsonLinesLogger(Logger):
    """
    Logger whose file holds nothing but JSON records; plain `log` lines
        become {"message": ...} records so the file stays parseable.
    """
    def log(self, string, timestamp = False):
        fields = {'message': str(string), 'pid': self.pid if self.pid else 'LOGPARENT'}
        if timestamp:
            fields['time'] = datetime.now().isoformat()
        self.record(**fields)
        return

    def sublogger(self, pid = None):
        if pid is None:
            pid = os.getpid()
        return JsonLinesLogger(logfile = self.logfile, pid = pid)

def read_records(logfile) -> list[dict]:
    records = []
    with open(logfile, 'r', encoding = 'utf-8') as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records

def _jsonable(value):
    # numpy / torch scalars and arrays
    if hasattr(value, 'tolist'):
        return value.tolist()
    if hasattr(value, 'item'):
        return value.item()
    return str(value)
