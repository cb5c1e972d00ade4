import csv
import io
import json

from .profiles import ProfileRow

PROFILE_HEADER = ['layer', 'magnitude_x', 'magnitude_y', 'grad_norm', 'ratio_x', 'ratio_y']


def format_float(value):
    """
    Shortest text that parses back to the same float; empty for None.
    Non-finite values are written as 'nan', 'inf' or '-inf'.
    """
    if value is None:
        return ''
    return repr(float(value))


def parse_float(text):
    return None if text in (None, '') else float(text)


def generate_profile_csv(rows):
    """
    Generate profile CSV text from a list of ProfileRows.

    Args:
        rows: ProfileRows in layer order

    Returns:
        A string containing the CSV data, LF line endings
    """
    output = io.StringIO()
    writer = csv.writer(output, lineterminator='\n')
    writer.writerow(PROFILE_HEADER)
    for row in rows:
        writer.writerow([
            row.layer_index,
            format_float(row.magnitude_X),
            format_float(row.magnitude_Y),
            format_float(row.grad_norm_block),
            format_float(row.ratio_X),
            format_float(row.ratio_Y),
        ])
    return output.getvalue()


def parse_profile_csv(csv_file):
    """
    Parse profile CSV data written by ``generate_profile_csv``.

    Args:
        csv_file: A file-like object or a string containing CSV data

    Returns:
        A list of ProfileRows
    """
    if isinstance(csv_file, str):
        csv_file = io.StringIO(csv_file)
    reader = csv.DictReader(csv_file)
    rows = []
    for record in reader:
        rows.append(ProfileRow(
            layer_index=int(record['layer']),
            magnitude_X=parse_float(record['magnitude_x']),
            magnitude_Y=parse_float(record['magnitude_y']),
            grad_norm_block=parse_float(record['grad_norm']),
            ratio_X=parse_float(record['ratio_x']),
            ratio_Y=parse_float(record['ratio_y']),
        ))
    return rows


def generate_jacobian_json(metadata, layers):
    """
    Jacobian dump: a metadata header (kind, d, seed, depth_scaling, ...)
    followed by one entry per sub-layer with nested-list matrices.
    """
    metadata = dict(metadata)
    spectrum = metadata.pop('ln_spectrum', None)
    payload = {
        'metadata': metadata,
        'layers': [
            {
                'layer': entry['layer'],
                'assembled': entry['assembled'].tolist(),
                'bruteforce': entry['bruteforce'].tolist(),
                'max_abs_diff': float(entry['max_abs_diff']),
            }
            for entry in layers
        ],
    }
    if spectrum is not None:
        payload['ln_spectrum'] = spectrum
    return json.dumps(payload, indent=2) + '\n'
