"""Procedural test meshes: icospheres, tori, and symmetry-broken variants.

No shape datasets ship with the toolkit, so demos, tests, and the timing
benchmark generate closed connected meshes on the fly. All generators are
deterministic.
"""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh

__all__ = ["icosphere", "torus", "bumpy", "single_triangle", "tetrahedron"]


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron projected onto the sphere.

    Vertex counts by subdivision level: 12, 42, 162, 642, 2562, ...
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(subdivisions):
        vlist = list(verts)
        midpoint = {}

        def midpoint_index(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = 0.5 * (vlist[a] + vlist[b])
                m /= np.linalg.norm(m)
                midpoint[key] = len(vlist)
                vlist.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab = midpoint_index(a, b)
            bc = midpoint_index(b, c)
            ca = midpoint_index(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)

    return TriMesh(verts * radius, faces)


def torus(n_major: int = 25, n_minor: int = 40, major_radius: float = 1.0,
          minor_radius: float = 0.4) -> TriMesh:
    """Regular torus grid with n_major * n_minor vertices (closed, genus 1)."""
    u = 2.0 * np.pi * np.arange(n_major) / n_major
    v = 2.0 * np.pi * np.arange(n_minor) / n_minor
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = (major_radius + minor_radius * np.cos(vv)) * np.cos(uu)
    y = (major_radius + minor_radius * np.cos(vv)) * np.sin(uu)
    z = minor_radius * np.sin(vv)
    verts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces.append([a, b, c])
            faces.append([a, c, d])
    return TriMesh(verts, np.array(faces, dtype=np.int64))


def bumpy(mesh: TriMesh, amplitude: float = 0.12, frequency: float = 3.0) -> TriMesh:
    """Displace vertices radially by a smooth deterministic field.

    Breaks rotational symmetries of the base shape, which keeps local
    reference frames and eigenspaces non-degenerate in tests.
    """
    v = mesh.vertices
    bump = (np.sin(frequency * v[:, 0] + 0.9)
            * np.cos(frequency * 1.3 * v[:, 1] - 0.4)
            + 0.5 * np.sin(frequency * 0.7 * v[:, 2] + 2.1))
    radial = v - v.mean(axis=0)
    norms = np.linalg.norm(radial, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return TriMesh(v + amplitude * bump[:, None] * radial / norms, mesh.faces)


def single_triangle(legs: float = 1.0) -> TriMesh:
    return TriMesh([[0, 0, 0], [legs, 0, 0], [0, legs, 0]], [[0, 1, 2]])


def tetrahedron(scale: float = 1.0) -> TriMesh:
    verts = scale * np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]], dtype=np.int64)
    return TriMesh(verts, faces)
