import struct

import numpy as np
import pytest

from posevote.cloud import PointCloud, TriangleMesh
from posevote.io import ModelParseError, load_model, write_ply

ASCII_TRI = b"""ply
format ascii 1.0
comment a single triangle
element vertex 3
property float x
property float y
property float z
property uchar red
element face 1
property list uchar int vertex_indices
end_header
0 0 0 255
1 0 0 255
0 1 0 255
3 0 1 2
"""

OBJ_CUBE = """# cube
o cube
v 0 0 0
v 0 0 1
v 0 1 0
v 0 1 1
v 1 0 0
v 1 0 1
v 1 1 0
v 1 1 1
vn 0 0 1
f 1 3 7
f 1 7 5
f 2 6 8
f 2 8 4
f 1 5 6
f 1 6 2
f 3 4 8
f 3 8 7
f 1 2 4
f 1 4 3
f 5 7 8
f 5 8 6
"""


def binary_ply(vertices, faces, with_normals=False):
    props = "property float x\nproperty float y\nproperty float z\n"
    if with_normals:
        props += "property float nx\nproperty float ny\nproperty float nz\n"
    header = (
        f"ply\nformat binary_little_endian 1.0\nelement vertex {len(vertices)}\n{props}"
        f"element face {len(faces)}\nproperty list uchar int vertex_indices\nend_header\n"
    ).encode()
    body = b"".join(struct.pack("<" + "f" * len(v), *v) for v in vertices)
    body += b"".join(struct.pack("<B3i", 3, *f) for f in faces)
    return header + body


def test_ascii_ply(tmp_path):
    p = tmp_path / "tri.ply"
    p.write_bytes(ASCII_TRI)
    mesh = load_model(p)
    assert isinstance(mesh, TriangleMesh)
    assert mesh.vertices.shape == (3, 3)
    assert mesh.faces.tolist() == [[0, 1, 2]]


def test_obj_cube(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(OBJ_CUBE)
    mesh = load_model(p)
    assert len(mesh.vertices) == 8
    assert len(mesh.faces) == 12


def test_obj_negative_indices(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3/1/1 -2/2/2 -1/3/3\n")
    assert load_model(p).faces.tolist() == [[0, 1, 2]]


def test_obj_index_out_of_range(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
    with pytest.raises(IndexError):
        load_model(p)


def test_binary_ply_with_normals(tmp_path):
    v = [(0, 0, 0, 0, 0, 1), (1, 0, 0, 0, 0, 1), (0, 1, 0, 0, 0, 1), (1, 1, 0, 0, 0, 1)]
    p = tmp_path / "quad.ply"
    p.write_bytes(binary_ply(v, [(0, 1, 2), (1, 3, 2)], with_normals=True))
    mesh = load_model(p)
    assert len(mesh.vertices) == 4
    assert mesh.faces.tolist() == [[0, 1, 2], [1, 3, 2]]


def test_truncated_binary_ply(tmp_path):
    data = binary_ply([(0, 0, 0), (1, 0, 0), (0, 1, 0)], [(0, 1, 2)])
    p = tmp_path / "cut.ply"
    p.write_bytes(data[:-7])
    with pytest.raises(ModelParseError) as err:
        load_model(p)
    assert err.value.offset is not None
    assert "offset" in str(err.value)


def test_ply_face_out_of_range(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_bytes(ASCII_TRI.replace(b"3 0 1 2", b"3 0 1 9"))
    with pytest.raises(IndexError):
        load_model(p)


def test_ply_bad_vertex_line(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_bytes(ASCII_TRI.replace(b"1 0 0 255", b"1 zero 0 255"))
    with pytest.raises(ModelParseError) as err:
        load_model(p)
    assert err.value.line == 13


def test_not_a_ply(tmp_path):
    p = tmp_path / "x.ply"
    p.write_bytes(b"hello\n")
    with pytest.raises(ModelParseError):
        load_model(p)


def test_round_trip(tmp_path, rng):
    c = PointCloud(rng.normal(size=(20, 3)))
    p = tmp_path / "c.ply"
    write_ply(p, c)
    back = load_model(p)
    np.testing.assert_allclose(back.points, c.points, atol=1e-6)


def test_unknown_format(tmp_path):
    p = tmp_path / "x.stl"
    p.write_text("solid")
    with pytest.raises(ValueError):
        load_model(p)
