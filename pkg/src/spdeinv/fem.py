"""P1 finite elements on interval and structured triangle meshes.

Matrices are assembled on the full vertex set; Dirichlet conditions are
imposed afterwards by restricting to interior vertices
(:meth:`FemSpace.restrict_matrix`).  Fields are callables that take an
``(npts, dim)`` array of points, or constants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from .sparse_linalg import SPDSolver, finalize

__all__ = [
    "Mesh",
    "FemSpace",
    "Coefficients",
    "EllipticityError",
    "build_interval_mesh",
    "build_rect_mesh",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_mg",
    "assemble_md",
    "load_vector",
    "l2_project",
    "inv_dirichlet_laplacian",
    "interpolate",
]

Field = Union[float, np.ndarray, Callable]


class EllipticityError(ValueError):
    pass


# Reference quadrature on the unit simplex: barycentric points and weights
# summing to one.  Degree 5 in 1D, degree 4 on triangles.
_g, _gw = np.polynomial.legendre.leggauss(3)
_Q1_BARY = np.column_stack([(1 - _g) / 2, (1 + _g) / 2])
_Q1_W = _gw / 2
_a, _b = 0.445948490915965, 0.091576213509771
_Q2_BARY = np.array([
    [1 - 2 * _a, _a, _a], [_a, 1 - 2 * _a, _a], [_a, _a, 1 - 2 * _a],
    [1 - 2 * _b, _b, _b], [_b, 1 - 2 * _b, _b], [_b, _b, 1 - 2 * _b],
])
_Q2_W = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)


def _quadrature(dim):
    return (_Q1_BARY, _Q1_W) if dim == 1 else (_Q2_BARY, _Q2_W)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Simplicial mesh: intervals (dim 1) or triangles (dim 2)."""

    vertices: np.ndarray  # (nv, dim)
    cells: np.ndarray  # (nc, dim + 1)
    boundary: np.ndarray  # sorted boundary vertex indices

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @cached_property
    def _geometry(self):
        pts = self.vertices[self.cells]  # (nc, d+1, d)
        jac = np.transpose(pts[:, 1:, :] - pts[:, :1, :], (0, 2, 1))  # columns are edges
        det = np.linalg.det(jac)
        if np.any(det == 0):
            raise ValueError("degenerate cell")
        inv = np.linalg.inv(jac)  # rows are gradients of barycentrics 1..d
        grads = np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)
        measure = np.abs(det) / (1 if self.dim == 1 else 2)
        return grads, measure

    @property
    def cell_measures(self) -> np.ndarray:
        return self._geometry[1]

    @property
    def basis_gradients(self) -> np.ndarray:
        """``(nc, dim + 1, dim)`` constant gradients of the local hat functions."""
        return self._geometry[0]

    @cached_property
    def h(self) -> float:
        """Maximum cell diameter."""
        pts = self.vertices[self.cells]
        n = self.cells.shape[1]
        diam = np.zeros(len(self.cells))
        for i in range(n):
            for j in range(i + 1, n):
                diam = np.maximum(diam, np.linalg.norm(pts[:, i] - pts[:, j], axis=1))
        return float(diam.max())

    @property
    def measure(self) -> float:
        return float(self.cell_measures.sum())

    def quadrature_points(self):
        """Physical quadrature points ``(nc, nq, dim)``, weights ``(nc, nq)`` and
        basis values ``(nq, dim + 1)``."""
        bary, w = _quadrature(self.dim)
        pts = np.einsum("qi,cid->cqd", bary, self.vertices[self.cells])
        return pts, self.cell_measures[:, None] * w[None, :], bary

    @cached_property
    def boundary_facets(self):
        """Facets on the boundary as ``(vertex indices, outward normal)`` arrays."""
        d = self.dim
        facets, normals = [], []
        if d == 1:
            counts = np.bincount(self.cells.ravel(), minlength=self.n_vertices)
            for c in self.cells:
                for i in range(2):
                    if counts[c[i]] == 1:
                        other = c[1 - i]
                        facets.append([c[i]])
                        normals.append([np.sign(self.vertices[c[i], 0] - self.vertices[other, 0])])
            return np.array(facets, dtype=int), np.array(normals, dtype=float)
        seen = {}
        for ci, c in enumerate(self.cells):
            for i in range(3):
                e = tuple(sorted((c[i], c[(i + 1) % 3])))
                seen.setdefault(e, []).append((ci, c[(i + 2) % 3]))
        for e, owners in seen.items():
            if len(owners) != 1:
                continue
            a, b = self.vertices[e[0]], self.vertices[e[1]]
            opp = self.vertices[owners[0][1]]
            t = b - a
            n = np.array([t[1], -t[0]]) / np.linalg.norm(t)
            if np.dot(n, a - opp) < 0:
                n = -n
            facets.append(list(e))
            normals.append(n)
        return np.array(facets, dtype=int), np.array(normals, dtype=float)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "vertices": self.vertices.tolist(),
            "cells": self.cells.tolist(),
            "boundary": self.boundary.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "Mesh":
        verts = np.asarray(data["vertices"], dtype=float).reshape(-1, data["dim"])
        return cls(verts, np.asarray(data["cells"], dtype=int), np.asarray(data["boundary"], dtype=int))

    @classmethod
    def from_json(cls, text: str) -> "Mesh":
        return cls.from_dict(json.loads(text))


def build_interval_mesh(n_cells: int, a: float = 0.0, b: float = 1.0) -> Mesh:
    """Uniform partition of ``[a, b]`` into ``n_cells`` intervals."""
    if n_cells < 2:
        raise ValueError("need at least two cells")
    if not b > a:
        raise ValueError("degenerate interval")
    x = np.linspace(a, b, n_cells + 1)
    cells = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    return Mesh(x[:, None], cells, np.array([0, n_cells]))


def build_rect_mesh(nx: int, ny: int, bounds=(-1.0, 1.0, -1.0, 1.0)) -> Mesh:
    """Structured right-triangle mesh of a rectangle ``(x0, x1, y0, y1)``.

    Each of the ``nx * ny`` grid quads is cut along its lower-left to
    upper-right diagonal.
    """
    if nx < 2 or ny < 2:
        raise ValueError("need at least two cells per direction")
    x0, x1, y0, y1 = bounds
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate bounds")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            v00, v10, v01, v11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
            cells.append([v00, v10, v11])
            cells.append([v00, v11, v01])
    on_edge = (
        np.isclose(verts[:, 0], x0) | np.isclose(verts[:, 0], x1)
        | np.isclose(verts[:, 1], y0) | np.isclose(verts[:, 1], y1)
    )
    return Mesh(verts, np.array(cells, dtype=int), np.flatnonzero(on_edge))


def _eval_scalar(fn: Field, pts: np.ndarray) -> np.ndarray:
    """Evaluate a scalar field at points of shape ``(..., dim)``."""
    shape = pts.shape[:-1]
    if callable(fn):
        vals = np.asarray(fn(pts.reshape(-1, pts.shape[-1])), dtype=float)
        return np.broadcast_to(vals.reshape(-1), (int(np.prod(shape)),)).reshape(shape)
    return np.full(shape, float(fn))


def _eval_vector(fn: Field, pts: np.ndarray) -> np.ndarray:
    shape = pts.shape[:-1]
    dim = pts.shape[-1]
    if callable(fn):
        vals = np.asarray(fn(pts.reshape(-1, dim)), dtype=float)
        return vals.reshape(shape + (dim,))
    return np.broadcast_to(np.asarray(fn, dtype=float).reshape(dim), shape + (dim,))


def _eval_matrix(fn: Field, pts: np.ndarray) -> np.ndarray:
    shape = pts.shape[:-1]
    dim = pts.shape[-1]
    if fn is None:
        return np.broadcast_to(np.eye(dim), shape + (dim, dim))
    if callable(fn):
        vals = np.asarray(fn(pts.reshape(-1, dim)), dtype=float)
        return vals.reshape(shape + (dim, dim))
    return np.broadcast_to(np.asarray(fn, dtype=float).reshape(dim, dim), shape + (dim, dim))


@dataclass
class Coefficients:
    """Problem data for ``du - div(a grad u) dt = (b1.grad u + b2 u + f) dt + (b3 u + g) dW``.

    ``a`` defaults to the identity.  ``b2`` and ``b3`` may be constants or
    fields of ``x``; ``f`` and ``g`` are callables ``(t, x)``.  All
    coefficients are deterministic and constant in time apart from the
    sources.
    """

    a: Optional[Field] = None
    b1: Optional[Field] = None
    b2: Field = 0.0
    b3: Field = 0.0
    f: Optional[Callable] = None
    g: Optional[Callable] = None
    T: float = 1.0

    @property
    def has_sources(self) -> bool:
        return self.f is not None or self.g is not None

    def homogeneous(self) -> "Coefficients":
        """Same operator with ``f = g = 0``."""
        return Coefficients(a=self.a, b1=self.b1, b2=self.b2, b3=self.b3, T=self.T)


def _local_to_global(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    """Scatter ``(nc, n, n)`` element matrices into a global CSR matrix."""
    cells = mesh.cells
    n = cells.shape[1]
    rows = np.repeat(cells, n, axis=1).ravel()
    cols = np.tile(cells, (1, n)).ravel()
    nv = mesh.n_vertices
    return finalize(rows, cols, local.ravel(), (nv, nv))


def assemble_mass(space: "FemSpace", weight: Optional[Field] = None) -> sp.csr_matrix:
    """Mass matrix ``int w phi_l phi_w``; exact closed form when ``weight`` is None."""
    mesh = space.mesh
    d = mesh.dim
    if weight is None:
        ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
        local = mesh.cell_measures[:, None, None] * ref[None]
    else:
        pts, wts, phi = mesh.quadrature_points()
        wv = _eval_scalar(weight, pts) * wts
        local = np.einsum("cq,qi,qj->cij", wv, phi, phi)
    return _local_to_global(mesh, local)


def assemble_stiffness(space: "FemSpace", a: Optional[Field] = None, sigma_min: float = 0.0) -> sp.csr_matrix:
    """Stiffness matrix ``int grad phi_l . a grad phi_w``.

    Raises
    ------
    EllipticityError
        If ``a`` is not symmetric or its smallest eigenvalue is not above
        ``sigma_min`` at some quadrature point.
    """
    mesh = space.mesh
    grads = mesh.basis_gradients
    if a is None:
        local = mesh.cell_measures[:, None, None] * np.einsum("cid,cjd->cij", grads, grads)
        return _local_to_global(mesh, local)
    pts, wts, _ = mesh.quadrature_points()
    avals = _eval_matrix(a, pts)
    if not np.allclose(avals, np.swapaxes(avals, -1, -2), rtol=0, atol=1e-12):
        raise EllipticityError("diffusion matrix is not symmetric")
    lam_min = np.linalg.eigvalsh(avals).min()
    if not lam_min > sigma_min:
        raise EllipticityError(f"diffusion matrix not uniformly elliptic (min eigenvalue {lam_min:g})")
    abar = np.einsum("cq,cqde->cde", wts, avals)  # integral of a over each cell
    local = np.einsum("cid,cde,cje->cij", grads, abar, grads)
    return _local_to_global(mesh, local)


def assemble_mg(space: "FemSpace", b1: Optional[Field]) -> sp.csr_matrix:
    """Advection matrix with entries ``int phi_l (b1 . grad phi_w)``."""
    mesh = space.mesh
    nv = mesh.n_vertices
    if b1 is None:
        return sp.csr_matrix((nv, nv))
    pts, wts, phi = mesh.quadrature_points()
    bv = _eval_vector(b1, pts)  # (nc, nq, d)
    bg = np.einsum("cqd,cjd->cqj", bv, mesh.basis_gradients)
    local = np.einsum("cq,qi,cqj->cij", wts, phi, bg)
    return _local_to_global(mesh, local)


def _boundary_flux_matrix(space: "FemSpace", b1: Field) -> sp.csr_matrix:
    """``int_{boundary} (b1 . n) phi_l phi_w`` over boundary facets."""
    mesh = space.mesh
    nv = mesh.n_vertices
    facets, normals = mesh.boundary_facets
    if mesh.dim == 1:
        vals = np.einsum("fd,fd->f", _eval_vector(b1, mesh.vertices[facets[:, 0]]), normals)
        return finalize(facets[:, 0], facets[:, 0], vals, (nv, nv))
    bary, w = _Q1_BARY, _Q1_W
    ends = mesh.vertices[facets]  # (nf, 2, 2)
    pts = np.einsum("qi,fid->fqd", bary, ends)
    length = np.linalg.norm(ends[:, 1] - ends[:, 0], axis=1)
    flux = np.einsum("fqd,fd->fq", _eval_vector(b1, pts), normals)
    local = np.einsum("fq,q,qi,qj->fij", flux * length[:, None], w, bary, bary)
    rows = np.repeat(facets, 2, axis=1).ravel()
    cols = np.tile(facets, (1, 2)).ravel()
    return finalize(rows, cols, local.ravel(), (nv, nv))


def assemble_md(space: "FemSpace", b1: Optional[Field]) -> sp.csr_matrix:
    """Matrix of the form ``(u, phi) -> int u div(b1 phi)``.

    Row index is the test function ``phi``, column index the trial ``u``.
    Realized by integration by parts,
    ``int u div(b1 phi) = -int phi b1 . grad u + int_boundary (b1 . n) u phi``,
    so only values of ``b1`` are needed.  The boundary term drops out on
    interior dofs.
    """
    mesh = space.mesh
    nv = mesh.n_vertices
    if b1 is None:
        return sp.csr_matrix((nv, nv))
    return (-assemble_mg(space, b1) + _boundary_flux_matrix(space, b1)).tocsr()


def load_vector(space: "FemSpace", func: Field) -> np.ndarray:
    """Full-mesh load vector ``int func phi_l``."""
    mesh = space.mesh
    pts, wts, phi = mesh.quadrature_points()
    fv = _eval_scalar(func, pts) * wts
    local = fv @ phi  # (nc, d+1)
    return np.bincount(mesh.cells.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def interpolate(space: "FemSpace", func: Field) -> np.ndarray:
    """Nodal interpolant on interior dofs."""
    return _eval_scalar(func, space.mesh.vertices[space.interior])


class FemSpace:
    """P1 space on a mesh with homogeneous Dirichlet conditions.

    ``dof_count`` counts all vertices; unknowns live on the ``L`` interior
    vertices.  Frequently used interior matrices and the Laplacian
    factorization are built lazily and cached.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.boundary = np.asarray(mesh.boundary, dtype=int)
        mask = np.ones(mesh.n_vertices, dtype=bool)
        mask[self.boundary] = False
        self.interior = np.flatnonzero(mask)

    @property
    def dof_count(self) -> int:
        return self.mesh.n_vertices

    @property
    def L(self) -> int:
        return len(self.interior)

    def restrict_matrix(self, m) -> sp.csr_matrix:
        m = sp.csr_matrix(m)
        return m[self.interior][:, self.interior].tocsr()

    def restrict(self, v) -> np.ndarray:
        return np.asarray(v)[self.interior]

    def extend(self, v) -> np.ndarray:
        """Interior coefficients to full vertex values (zero on the boundary)."""
        v = np.asarray(v, dtype=float)
        out = np.zeros((self.dof_count,) + v.shape[1:])
        out[self.interior] = v
        return out

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return self.restrict_matrix(assemble_mass(self))

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Interior stiffness of the plain Laplacian."""
        return self.restrict_matrix(assemble_stiffness(self))

    @cached_property
    def mass_solver(self) -> SPDSolver:
        return SPDSolver(self.mass)

    @cached_property
    def laplacian_solver(self) -> SPDSolver:
        return SPDSolver(self.stiffness)


def l2_project(space: FemSpace, func: Field) -> np.ndarray:
    """L2 projection onto the interior P1 space: ``Mass c = load(func)``."""
    return space.mass_solver.solve(space.restrict(load_vector(space, func)))


def inv_dirichlet_laplacian(space: FemSpace, v) -> np.ndarray:
    """Discrete ``(-Delta)^{-1}``: solve ``Stiff x = Mass v`` on interior dofs."""
    v = np.asarray(v, dtype=float)
    return space.laplacian_solver.solve(space.mass @ v)
