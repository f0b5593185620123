"""
Reports generation and export module
"""
import csv
import json
import logging
from io import StringIO
from pathlib import Path

from config import (
    RESULTS_FILE, SUMMARY_FILE, BUCKET_CSV_FILE, KNOWLEDGE_CSV_FILE, MEMORY_METHODS, CAPACITY_CONDITIONS
)
from modules.memory import MemoryMethod
from modules.registry import RunRegistryManager
from utils.errors import ValidationError

logger = logging.getLogger(__name__)


def _fmt(value):
    return "" if value is None else f"{value:.6f}"


class ReportGenerator:
    """Per-run result files and the merged method x capacity table"""

    def __init__(self, registry=None):
        self.registry = registry or RunRegistryManager()

    # ------------------------------------------------------------------
    # Per-run files
    # ------------------------------------------------------------------

    def bucket_csv(self, curve):
        output = StringIO()
        writer = csv.writer(output, lineterminator="\n")
        writer.writerow(['bucket', 'raw', 'smoothed', 'count'])
        for label, raw, smoothed, count in curve.bucket_rows():
            writer.writerow([label, _fmt(raw), _fmt(smoothed), count])
        return output.getvalue()

    def knowledge_csv(self, curve):
        output = StringIO()
        writer = csv.writer(output, lineterminator="\n")
        writer.writerow(['session', 'k', 'carried'])
        for s, (k, carried) in enumerate(zip(curve.k_series, curve.k_carried)):
            writer.writerow([s, _fmt(k), int(carried)])
        return output.getvalue()

    def write_run_outputs(self, run_dir, result, extra_summary=None):
        """results.jsonl, summary.json and both curve CSVs"""
        run_dir = Path(run_dir)
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
            with open(run_dir / RESULTS_FILE, 'w', encoding='utf-8') as f:
                for q in result.questions:
                    f.write(json.dumps(q.to_dict(), sort_keys=True) + "\n")
            summary = dict(result.summary)
            summary['buckets'] = [
                {'bucket': label, 'raw': raw, 'smoothed': smoothed, 'count': count}
                for label, raw, smoothed, count in result.curve.bucket_rows()
            ]
            summary['k_series'] = list(result.curve.k_series)
            summary.update(extra_summary or {})
            (run_dir / SUMMARY_FILE).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding='utf-8')
            (run_dir / BUCKET_CSV_FILE).write_text(self.bucket_csv(result.curve), encoding='utf-8')
            (run_dir / KNOWLEDGE_CSV_FILE).write_text(self.knowledge_csv(result.curve), encoding='utf-8')
            logger.info(f"Run outputs written to {run_dir}")
            return summary
        except Exception as e:
            logger.error(f"Error writing run outputs to {run_dir}: {e}")
            raise

    # ------------------------------------------------------------------
    # Merged table
    # ------------------------------------------------------------------

    def merged_table(self, names=None):
        """
        Rows M.0-M.6 with retained % and delta K at each capacity, plus the change
        in retained score from 1x to 10x. Refuses runs evaluated on different corpora.
        """
        runs = self.registry.get_runs_by_names(names) if names else self.registry.get_all_runs()
        if not runs:
            return []
        hashes = sorted({r.corpus_hash for r in runs})
        if len(hashes) > 1:
            raise ValidationError(
                f"refusing to merge runs over {len(hashes)} different corpora: "
                + ", ".join(f"{r.name}={r.corpus_hash[:12]}" for r in runs)
            )

        cells = {}
        for run in runs:
            key = (run.method, run.capacity)
            if key in cells:
                logger.warning(f"several runs for {run.method} {run.capacity}; averaging over seeds")
            cells.setdefault(key, []).append(run)

        rows = []
        for method in MEMORY_METHODS:
            row = {'method': MemoryMethod.parse(method).label}
            present = False
            for capacity in CAPACITY_CONDITIONS:
                group = cells.get((method, capacity), [])
                if group:
                    present = True
                    row[f'retained_{capacity}'] = sum(r.retained_pct for r in group) / len(group)
                    row[f'delta_k_{capacity}'] = sum(r.delta_k for r in group) / len(group)
                else:
                    row[f'retained_{capacity}'] = None
                    row[f'delta_k_{capacity}'] = None
            low, high = row.get('retained_1x'), row.get('retained_10x')
            row['retained_change'] = high - low if low is not None and high is not None else None
            if present:
                rows.append(row)
        return rows

    def export_to_csv(self, rows):
        output = StringIO()
        writer = csv.writer(output, lineterminator="\n")
        columns = ['method']
        for capacity in CAPACITY_CONDITIONS:
            columns += [f'retained_{capacity}', f'delta_k_{capacity}']
        columns.append('retained_change')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row['method']] + [_fmt(row[c]) for c in columns[1:]])
        return output.getvalue()

    def format_table(self, rows):
        """Plain-text table for the terminal"""
        header = f"{'Method':<8}" + "".join(
            f"{'Ret% ' + c:>12}{'dK ' + c:>10}" for c in CAPACITY_CONDITIONS
        ) + f"{'Ret% change':>13}"
        lines = [header, "-" * len(header)]

        def cell(value, width):
            return f"{'-':>{width}}" if value is None else f"{value:>{width}.2f}"

        for row in rows:
            line = f"{row['method']:<8}"
            for c in CAPACITY_CONDITIONS:
                line += cell(row[f'retained_{c}'], 12) + cell(row[f'delta_k_{c}'], 10)
            line += cell(row['retained_change'], 13)
            lines.append(line)
        return "\n".join(lines)

    def close_session(self):
        self.registry.close_session()
