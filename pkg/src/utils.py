import os
import shutil
import hashlib
from contextlib import contextmanager

from dotenv import dotenv_values


class UsageError(ValueError):
    """
    Invalid option value; maps to exit code 2
    """
    pass


def hashcode_md5(data: bytes):
    """
    Hex md5 of one bytes object (image checksums)
    """
    hash_obj = hashlib.md5()
    hash_obj.update(data)
    return hash_obj.hexdigest()


def parse_kv_list(text, value_type=float):
    """
    "a=1,b=2.5" -> {"a": 1.0, "b": 2.5}
    """
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue

        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")

        key, value = item.split("=", 1)
        try:
            out[key.strip()] = value_type(value.strip())
        except ValueError:
            raise UsageError(f"bad value for {key.strip()}: {value.strip()!r}")

    return out


def parse_csv_list(text, value_type=str):
    try:
        return [value_type(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad list value: {text!r}")


def load_config_defaults(path, parser):
    """
    Read key=value lines (python-dotenv format) and turn them into parser
    defaults. Keys may use dashes or underscores. Explicit flags still
    win because defaults only fill what the command line leaves out.
    """
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")

    known = {a.dest for a in parser._actions}
    defaults = {}
    for key, value in dotenv_values(path).items():
        dest = key.strip().replace("-", "_")
        if dest in ("command", "config"):
            continue
        if dest not in known:
            raise UsageError(f"unknown config key in {path}: {key}")
        if value is not None:
            defaults[dest] = value

    return defaults


def config_echo(args, skip=("func", "config")):
    """
    key=value lines for every option, sorted by key
    """
    lines = []
    for key, value in sorted(vars(args).items()):
        if key in skip or value is None:
            continue
        lines.append(f"{key}={value}")

    return "\n".join(lines) + "\n"


@contextmanager
def atomic_dir(target):
    """
    Yield a temporary sibling directory; on success it replaces `target`,
    on failure it is removed and `target` is left untouched.
    """
    target = os.path.abspath(target)
    parent = os.path.dirname(target)
    os.makedirs(parent, exist_ok=True)

    tmp = os.path.join(parent, f".{os.path.basename(target)}.tmp{os.getpid()}")
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)

    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise

    if os.path.exists(target):
        print(f"[WARN] replacing existing directory: {target}")
        shutil.rmtree(target)
    os.replace(tmp, target)


def env_default(value, key, fallback):
    """
    Explicit value, else the environment (filled by load_dotenv), else fallback
    """
    if value is not None:
        return value
    return os.getenv(key, fallback)
