import csv
import io

from analysis.utils import format_float, parse_float

from .loop import MetricsRecord

METRICS_HEADER = ['step', 'loss', 'lr', 'grad_norm', 'clip_factor', 'eval_acc', 'eval_loss']


def generate_metrics_csv(records):
    """
    Generate metrics CSV text, one row per MetricsRecord.

    Args:
        records: MetricsRecords in step order

    Returns:
        A string containing the CSV data
    """
    output = io.StringIO()
    writer = csv.writer(output, lineterminator='\n')
    writer.writerow(METRICS_HEADER)
    for record in records:
        writer.writerow([
            record.step,
            format_float(record.loss),
            format_float(record.lr),
            format_float(record.grad_norm),
            format_float(record.clip_factor),
            format_float(record.eval_acc),
            format_float(record.eval_loss),
        ])
    return output.getvalue()


def parse_metrics_csv(csv_file):
    """
    Parse metrics CSV data back into MetricsRecords.

    Args:
        csv_file: A file-like object or a string containing CSV data
    """
    if isinstance(csv_file, str):
        csv_file = io.StringIO(csv_file)
    records = []
    for row in csv.DictReader(csv_file):
        records.append(MetricsRecord(
            step=int(row['step']),
            loss=float(row['loss']),
            lr=float(row['lr']),
            grad_norm=float(row['grad_norm']),
            clip_factor=float(row['clip_factor']),
            eval_acc=parse_float(row.get('eval_acc')),
            eval_loss=parse_float(row.get('eval_loss')),
        ))
    return records
