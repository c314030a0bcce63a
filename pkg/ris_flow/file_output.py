import json
import logging
import os
from typing import Any, Dict, List, Optional

import markdown
import numpy as np
import pandas as pd

from ris_flow.errors import ConfigError
from utils import log_to_run_file

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = '%.10g'

HTML_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>{title}</title>
    <style>
        body {{ font-family: Arial, sans-serif; line-height: 1.6; }}
        table {{ border-collapse: collapse; }}
        th, td {{ border: 1px solid #ddd; padding: 6px 10px; text-align: left; }}
        th {{ background-color: #f2f2f2; }}
    </style>
</head>
<body>
{content}
</body>
</html>
"""


def ensure_output_dir(output_dir: str) -> str:
    """Create the output directory if needed and make sure it accepts files.

    Raises:
        ConfigError: If the directory cannot be created or written to.
    """
    try:
        os.makedirs(output_dir, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Cannot create output directory {output_dir}: {e}") from e
    if not os.access(output_dir, os.W_OK):
        raise ConfigError(f"Output directory {output_dir} is not writable")
    return output_dir


def output_name(kind: str, config_hash: str, seed: int, ext: str) -> str:
    return f"{kind}_{config_hash[:8]}_seed{seed}.{ext}"


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return _to_jsonable(value.item())
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def write_csv(
    frame: pd.DataFrame,
    output_dir: str,
    kind: str,
    config_hash: str,
    seed: int,
    run_id: Optional[str] = None,
) -> str:
    """Write a series as CSV behind ``# config_hash=`` and ``# seed=`` header lines.

    Returns:
        str: Path of the written file.
    """
    path = os.path.join(output_dir, output_name(kind, config_hash, seed, 'csv'))
    with open(path, 'w', newline='', encoding='utf-8') as f:
        f.write(f"# config_hash={config_hash}\n")
        f.write(f"# seed={seed}\n")
        frame.to_csv(f, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator='\n')
    log_to_run_file(run_id, "saving", f"✅ Saved CSV file: {path}")
    logger.info(f"💾 Saved {len(frame)} rows to {path}")
    return path


def write_json(
    payload: Dict[str, Any],
    output_dir: str,
    kind: str,
    config_hash: str,
    seed: int,
    run_id: Optional[str] = None,
) -> str:
    """Write a JSON document carrying ``config_hash`` and ``seed`` fields.

    Returns:
        str: Path of the written file.
    """
    document = _to_jsonable(dict(payload))
    document['config_hash'] = config_hash
    document['seed'] = seed
    path = os.path.join(output_dir, output_name(kind, config_hash, seed, 'json'))
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write('\n')
    log_to_run_file(run_id, "saving", f"✅ Saved JSON file: {path}")
    logger.info(f"💾 Saved {path}")
    return path


def render_validation_markdown(results: List[Dict[str, Any]], config_hash: str, seed: int, budget: str) -> str:
    passed = sum(1 for r in results if r['passed'])
    lines = [
        "# Validation report",
        "",
        f"- config hash: `{config_hash}`",
        f"- seed: {seed}",
        f"- budget: {budget}",
        f"- passed: {passed} / {len(results)}",
        "",
        "| Oracle | Result | Measured | Tolerance | Detail |",
        "|---|---|---|---|---|",
    ]
    for r in results:
        status = "PASS" if r['passed'] else "FAIL"
        lines.append(f"| {r['name']} | {status} | {r['measured']:.6g} | {r['tolerance']:.6g} | {r.get('detail', '')} |")
    return "\n".join(lines) + "\n"


def save_validation_report(
    results: List[Dict[str, Any]],
    output_dir: str,
    config_hash: str,
    seed: int,
    budget: str,
    run_id: Optional[str] = None,
) -> Dict[str, str]:
    """Save the oracle table as Markdown and as an HTML page rendered from it.

    Returns:
        Dict[str, str]: Paths keyed by ``markdown`` and ``html``.
    """
    markdown_content = render_validation_markdown(results, config_hash, seed, budget)
    base = output_name('validate', config_hash, seed, 'md')[:-3]

    md_file = os.path.join(output_dir, f"{base}.md")
    with open(md_file, 'w', encoding='utf-8') as f:
        f.write(markdown_content)
    log_to_run_file(run_id, "saving", f"✅ Saved Markdown file: {md_file}")

    html_content = markdown.markdown(markdown_content, extensions=['tables', 'fenced_code'])
    html_file = os.path.join(output_dir, f"{base}.html")
    with open(html_file, 'w', encoding='utf-8') as f:
        f.write(HTML_TEMPLATE.format(title="Validation report", content=html_content))
    log_to_run_file(run_id, "saving", f"✅ Saved HTML file: {html_file}")

    return {'markdown': md_file, 'html': html_file}
