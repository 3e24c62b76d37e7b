"""Reading and writing of numeric matrices, attention stacks and reports.

Matrices are read from CSV, TSV or XLSX files with one row per sample.
Everything written goes to a temporary file next to the target and is then
renamed into place, so a reader never sees a half-written file.
"""

# First come standard libraries, in alphabetical order.
import csv
import json
import logging
import os
from pathlib import Path
import tempfile

# After a blank line, import third-party libraries.
import numpy as np
import openpyxl
from openpyxl.styles import Font

# After another blank line, import local libraries.
from .errors import BadExtensionError
from .errors import DimensionError
from .errors import MalformedInputError
from .errors import MissingInputError

logger = logging.getLogger(__name__)

DELIMITERS = {'.csv': ',', '.tsv': '\t', '.txt': '\t'}
MATRIX_EXTENSIONS = tuple(DELIMITERS) + ('.xlsx',)
FLOAT_FORMAT = '%.17g'


def check_input_path(input_path):
    input_path = Path(input_path)
    if not input_path.exists():
        raise MissingInputError('Input file is missing: {}', input_path)
    if not input_path.is_file():
        raise MissingInputError('Input is not a file: {}', input_path)
    return input_path


def read_matrix(input_file, header=False):
    """Return the numeric contents of a CSV, TSV or XLSX file as a 2-D float
    array. When header is true the first row is skipped. Ragged rows and
    cells that are not numbers raise MalformedInputError naming the 1-based
    row and column."""
    input_path = check_input_path(input_file)
    suffix = input_path.suffix.lower()
    if suffix == '.xlsx':
        row_iter = generate_xlsx_rows(input_path)
    elif suffix in DELIMITERS:
        row_iter = generate_text_rows(input_path, DELIMITERS[suffix])
    else:
        raise BadExtensionError(
            'Input file has bad extension: {} (expected one of {})',
            input_path, ', '.join(MATRIX_EXTENSIONS)
        )
    rows = []
    width = None
    for row_number, row in enumerate(row_iter, start=1):
        if header and row_number == 1:
            continue
        row = strip_trailing_empty(row)
        if not row:
            continue
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise MalformedInputError(
                'Ragged row in {}: row {} has {} columns, expected {}',
                input_path, row_number, len(row), width
            )
        rows.append([parse_cell(value, input_path, row_number, column)
                     for column, value in enumerate(row, start=1)])
    if not rows:
        raise MalformedInputError('Input file has no data rows: {}',
                                  input_path)
    logger.debug('read %s: %s x %s', input_path, len(rows), width)
    return np.array(rows, dtype=float)


def generate_text_rows(input_path, delimiter):
    """Generator function that yields rows as lists of strings."""
    with open(str(input_path), newline='') as fin:
        for row in csv.reader(fin, delimiter=delimiter):
            yield row


def generate_xlsx_rows(input_path):
    """Generator function that yields lists of cell values from the active
    worksheet."""
    wb = openpyxl.load_workbook(str(input_path),
                                data_only=True, read_only=True)
    active_sheet = wb.active
    logger.debug('active_sheet name: %s', active_sheet.title)
    for row in active_sheet.rows:
        yield [c.value for c in row]


def strip_trailing_empty(row):
    row = list(row)
    while row and (row[-1] is None or str(row[-1]).strip() == ''):
        row.pop()
    return row


def parse_cell(value, input_path, row_number, column):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    try:
        return float(str(value).strip())
    except (TypeError, ValueError):
        raise MalformedInputError(
            'Non-numeric value in {} at row {}, column {}: {!r}',
            input_path, row_number, column, value
        )


def read_attention_stack(input_file):
    """Return the list of attention matrices found at input_file, which is
    either a directory of matrix files (read in name order) or a JSON
    document {"p": ..., "n_patches": ..., "matrices": [[[...]]]}."""
    input_path = Path(input_file)
    if input_path.is_dir():
        paths = sorted(p for p in input_path.iterdir()
                       if p.suffix.lower() in MATRIX_EXTENSIONS)
        logger.debug('attention directory %s: %s files', input_path,
                     len(paths))
        return [read_matrix(p) for p in paths]
    document = read_json(input_path)
    try:
        matrices = [np.array(m, dtype=float) for m in document['matrices']]
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedInputError('Attention JSON is bad: {}. {}',
                                  input_path, e)
    expected = (document.get('p'), document.get('n_patches'))
    for index, matrix in enumerate(matrices):
        if matrix.ndim != 2 or (None not in expected
                                and matrix.shape != expected):
            raise DimensionError(
                'Attention matrix {} in {} has shape {}, expected {}',
                index, input_path, matrix.shape, expected
            )
    return matrices


def read_json(input_file):
    input_path = check_input_path(input_file)
    try:
        with open(str(input_path)) as fin:
            return json.load(fin)
    except json.JSONDecodeError as e:
        raise MalformedInputError('JSON is bad: {}. {}', input_path, e)


def atomic_write(output_file, write_contents, mode='w'):
    """Call write_contents(stream) on a temporary file beside output_file,
    then rename it over output_file."""
    output_path = Path(output_file)
    directory = output_path.parent if str(output_path.parent) else Path('.')
    directory.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(prefix='.' + output_path.name + '.',
                                     dir=str(directory))
    try:
        newline = '' if 'b' not in mode else None
        with os.fdopen(fd, mode, newline=newline) as fout:
            write_contents(fout)
        os.replace(temp_name, str(output_path))
    except BaseException:
        if os.path.exists(temp_name):
            os.remove(temp_name)
        raise
    logger.debug('wrote %s', output_path)
    return output_path


def format_float(value):
    return FLOAT_FORMAT % value


def write_matrix(output_file, matrix, header=None):
    """Write a 2-D array as CSV with 17 significant digits per cell."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def write_contents(fout):
        writer = csv.writer(fout, lineterminator='\n')
        if header:
            writer.writerow(header)
        for row in matrix:
            writer.writerow([format_float(v) for v in row])
    return atomic_write(output_file, write_contents)


def write_table(output_file, header, rows, delimiter=','):
    """Write rows of mixed values; floats get 17 significant digits."""
    def write_contents(fout):
        writer = csv.writer(fout, delimiter=delimiter, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v
                             for v in row])
    return atomic_write(output_file, write_contents)


def to_jsonable(obj):
    """Convert numpy containers and scalars into plain Python values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        # repr of a double is the shortest string that reads back exactly.
        # JSON has no inf or nan, they are written as null.
        return float(obj) if np.isfinite(obj) else None
    return obj


def dumps_json(obj):
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=1,
                      allow_nan=False)


def write_json(output_file, obj):
    return atomic_write(output_file,
                        lambda fout: fout.write(dumps_json(obj) + '\n'))


def write_jsonl(output_file, records):
    def write_contents(fout):
        for record in records:
            fout.write(json.dumps(to_jsonable(record), sort_keys=True,
                                  allow_nan=False))
            fout.write('\n')
    return atomic_write(output_file, write_contents)


def write_workbook(output_file, header, rows, title='results'):
    """Write a single worksheet table, header in bold."""
    wb = openpyxl.Workbook()
    ws = wb.active
    ws.title = title
    ws.append(list(header))
    for cell in ws[1]:
        cell.font = Font(bold=True)
    for row in rows:
        ws.append([to_jsonable(v) for v in row])
    return atomic_write(output_file, wb.save, mode='wb')
