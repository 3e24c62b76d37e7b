import json
from pathlib import Path

from openpyxl import Workbook
import numpy as np
import pytest

from joint_ggm import matrix_io
from joint_ggm.errors import BadExtensionError
from joint_ggm.errors import DimensionError
from joint_ggm.errors import MalformedInputError
from joint_ggm.errors import MissingInputError


def write_text(path, text):
    path = Path(str(path))
    path.write_text(text)
    return path


def test_read_csv_and_tsv(tmpdir):
    csv_path = write_text(tmpdir.join('m.csv'), '1,2\n3,4.5\n')
    tsv_path = write_text(tmpdir.join('m.tsv'), 'a\tb\n1\t2\n3\t4.5\n')
    expected = np.array([[1.0, 2.0], [3.0, 4.5]])
    assert np.array_equal(matrix_io.read_matrix(csv_path), expected)
    assert np.array_equal(matrix_io.read_matrix(tsv_path, header=True),
                          expected)


def test_read_xlsx(tmpdir):
    xlsx_path = str(tmpdir.join('m.xlsx'))
    wb = Workbook()
    ws = wb.active
    ws.append(['x', 'y'])
    ws.append([1, 2.5])
    ws.append(['3', 4])
    wb.save(xlsx_path)
    result = matrix_io.read_matrix(xlsx_path, header=True)
    assert np.array_equal(result, [[1.0, 2.5], [3.0, 4.0]])


def test_ragged_row_names_the_row(tmpdir):
    path = write_text(tmpdir.join('m.csv'), '1,2\n3,4\n5\n')
    with pytest.raises(MalformedInputError) as e:
        matrix_io.read_matrix(path)
    assert 'row 3 has 1 columns, expected 2' in e.value.message


def test_non_numeric_cell_names_row_and_column(tmpdir):
    path = write_text(tmpdir.join('m.csv'), '1,2\n3,oops\n')
    with pytest.raises(MalformedInputError) as e:
        matrix_io.read_matrix(path)
    assert 'row 2, column 2' in e.value.message
    assert e.value.error_code == 10


def test_bad_extension_and_missing_file(tmpdir):
    path = write_text(tmpdir.join('m.dat'), '1,2\n')
    with pytest.raises(BadExtensionError):
        matrix_io.read_matrix(path)
    with pytest.raises(MissingInputError):
        matrix_io.read_matrix(str(tmpdir.join('nope.csv')))
    with pytest.raises(MissingInputError):
        matrix_io.read_matrix(str(tmpdir))


def test_empty_file_is_malformed(tmpdir):
    path = write_text(tmpdir.join('m.csv'), '\n\n')
    with pytest.raises(MalformedInputError):
        matrix_io.read_matrix(path)


def test_write_matrix_keeps_every_bit(tmpdir):
    rng = np.random.default_rng(3)
    matrix = rng.standard_normal((4, 3)) / 7.0
    path = matrix_io.write_matrix(str(tmpdir.join('out/m.csv')), matrix)
    assert np.array_equal(matrix_io.read_matrix(path), matrix)


def test_atomic_write_leaves_no_temporary_files(tmpdir):
    matrix_io.write_json(str(tmpdir.join('a.json')), {'x': np.float64(0.1)})
    assert [p.basename for p in tmpdir.listdir()] == ['a.json']
    assert json.loads(tmpdir.join('a.json').read()) == {'x': 0.1}


def test_failed_write_keeps_previous_file(tmpdir):
    target = str(tmpdir.join('a.txt'))
    write_text(target, 'old\n')

    def explode(fout):
        fout.write('partial')
        raise RuntimeError('boom')
    with pytest.raises(RuntimeError):
        matrix_io.atomic_write(target, explode)
    assert Path(target).read_text() == 'old\n'
    assert len(tmpdir.listdir()) == 1


def test_to_jsonable_converts_numpy():
    obj = {'a': np.arange(3), 'b': np.bool_(True), 'c': (np.int64(2),)}
    assert matrix_io.to_jsonable(obj) == {'a': [0, 1, 2], 'b': True,
                                         'c': [2]}


def test_non_finite_values_become_null(tmpdir):
    text = matrix_io.dumps_json({'x': [1.0, np.inf, np.float64('nan')],
                                 'y': -np.inf})
    assert 'Infinity' not in text and 'NaN' not in text
    assert json.loads(text) == {'x': [1.0, None, None], 'y': None}
    path = matrix_io.write_jsonl(str(tmpdir.join('r.jsonl')),
                                 [{'objective': np.inf}])
    assert Path(str(path)).read_text() == '{"objective": null}\n'


def test_write_table_formats_floats(tmpdir):
    path = matrix_io.write_table(str(tmpdir.join('t.tsv')), ['a', 'b'],
                                 [['x', 0.1], ['y', 2]], delimiter='\t')
    assert Path(str(path)).read_text() == 'a\tb\nx\t0.10000000000000001\ny\t2\n'


def test_read_attention_stack_from_directory(tmpdir):
    write_text(tmpdir.join('b.csv'), '0.5,0.5\n1,0\n')
    write_text(tmpdir.join('a.csv'), '1,0\n0,1\n')
    write_text(tmpdir.join('notes.md'), 'ignored\n')
    stack = matrix_io.read_attention_stack(str(tmpdir))
    assert len(stack) == 2
    assert np.array_equal(stack[0], np.eye(2))


def test_read_attention_stack_from_json(tmpdir):
    path = tmpdir.join('att.json')
    path.write(json.dumps({'p': 2, 'n_patches': 3,
                           'matrices': [[[1, 0, 0], [0, 0.5, 0.5]]]}))
    stack = matrix_io.read_attention_stack(str(path))
    assert stack[0].shape == (2, 3)
    path.write(json.dumps({'p': 3, 'n_patches': 3,
                           'matrices': [[[1, 0, 0], [0, 0.5, 0.5]]]}))
    with pytest.raises(DimensionError):
        matrix_io.read_attention_stack(str(path))


def test_bad_json(tmpdir):
    path = write_text(tmpdir.join('x.json'), '{not json')
    with pytest.raises(MalformedInputError):
        matrix_io.read_json(path)


def test_write_workbook(tmpdir):
    from openpyxl import load_workbook
    path = str(tmpdir.join('t.xlsx'))
    matrix_io.write_workbook(path, ['method', 'f1'],
                             [['joint', np.float64(0.75)]], title='recovery')
    ws = load_workbook(path).active
    assert ws.title == 'recovery'
    assert ws['A1'].font.bold
    assert ws['B2'].value == 0.75
