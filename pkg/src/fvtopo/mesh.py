"""Structured quadrilateral meshes, Q4 plane-stress elements and assembly.

Topologies are plain integer arrays ``x`` of shape (N,) with entries in
{0, 1} (1 = solid, 0 = void).  Variation vectors ``y = x_new - x_base``
take values in {-1, 0, +1}.  Element grids may be masked, so non-rectangular
domains (e.g. a beam with a hanging tie) are ordinary meshes here.

Conventions:
  * grid columns run left to right, grid rows top to bottom;
  * elements are numbered column-major, top to bottom within each column;
  * node coordinates use y pointing up, so row 0 sits at the top;
  * element DOF order is (u1, v1, ..., u4, v4) for the CCW node sequence
    bottom-left, bottom-right, top-right, top-left.

Dirichlet constraints are homogeneous and are applied by deleting the
fixed rows/columns, so every stored elemental matrix is already the
constrained one (size g_i <= 8) together with its global free-DOF ids.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Material",
    "Mesh",
    "FemProblem",
    "element_stiffness_q4",
    "element_sqrt",
    "assemble_global",
    "compliance",
    "volume",
    "as_density",
    "as_variation",
]

# Gauss points for 2x2 quadrature on [-1, 1]^2
_GP = 1.0 / np.sqrt(3.0)
_GAUSS = [(-_GP, -_GP), (_GP, -_GP), (_GP, _GP), (-_GP, _GP)]
# natural coordinates of the CCW node sequence
_NAT = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])


@dataclass(frozen=True)
class Material:
    """Linear-elastic isotropic plane-stress material."""

    youngs_modulus: float
    poissons_ratio: float
    thickness: float = 1.0

    def __post_init__(self):
        if self.youngs_modulus <= 0:
            raise ValueError("youngs_modulus must be positive")
        if not 0.0 <= self.poissons_ratio < 0.5:
            raise ValueError("poissons_ratio must lie in [0, 0.5)")
        if self.thickness <= 0:
            raise ValueError("thickness must be positive")


def element_stiffness_q4(material: Material, elem_w: float, elem_h: float) -> np.ndarray:
    """8x8 stiffness of a rectangular bilinear Q4 plane-stress element.

    2x2 Gauss quadrature, which is exact for the bilinear integrand on a
    rectangle.  Unconstrained: the matrix has the three rigid-body modes
    in its null space.
    """
    if elem_w <= 0 or elem_h <= 0:
        raise ValueError("element dimensions must be positive")
    e, nu, t = material.youngs_modulus, material.poissons_ratio, material.thickness
    d = (e / (1.0 - nu * nu)) * np.array(
        [[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]]
    )
    k = np.zeros((8, 8))
    det_j = 0.25 * elem_w * elem_h
    for xi, eta in _GAUSS:
        dn_dxi = 0.25 * _NAT[:, 0] * (1.0 + eta * _NAT[:, 1])
        dn_deta = 0.25 * _NAT[:, 1] * (1.0 + xi * _NAT[:, 0])
        dn_dx = dn_dxi * 2.0 / elem_w
        dn_dy = dn_deta * 2.0 / elem_h
        b = np.zeros((3, 8))
        b[0, 0::2] = dn_dx
        b[1, 1::2] = dn_dy
        b[2, 0::2] = dn_dy
        b[2, 1::2] = dn_dx
        k += b.T @ d @ b * det_j
    k *= t
    return 0.5 * (k + k.T)


def element_sqrt(k_elem: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root S of a symmetric PSD matrix, S @ S = k_elem.

    Eigenvalues below 1e-12 of the largest are clamped to zero; an
    eigenvalue below -1e-9 of the largest is rejected as not PSD.
    """
    k_elem = np.asarray(k_elem, dtype=float)
    lam, phi = np.linalg.eigh(0.5 * (k_elem + k_elem.T))
    lam_max = max(lam[-1], 0.0)
    if lam.size and lam[0] < -1e-9 * lam_max:
        raise ValueError(f"matrix is not PSD (min eigenvalue {lam[0]:g})")
    lam = np.where(lam < 1e-12 * lam_max, 0.0, lam)
    s = (phi * np.sqrt(lam)) @ phi.T
    return 0.5 * (s + s.T)


class Mesh:
    """Structured (optionally masked) quad mesh with constrained DOF maps.

    Parameters
    ----------
    nx, ny : element counts along x (columns) and y (rows)
    elem_w, elem_h : element dimensions
    element_mask : optional (ny, nx) bool array; True cells belong to the
        domain.  Omitted means the full rectangle.
    fixed : iterable of (grid_col, grid_row, comp) node constraints, with
        comp in {0 (u), 1 (v)}; grid node (0, 0) is the top-left corner.
    """

    def __init__(self, nx, ny, elem_w, elem_h, element_mask=None, fixed=()):
        if nx < 1 or ny < 1:
            raise ValueError("nx, ny must be at least 1")
        if elem_w <= 0 or elem_h <= 0:
            raise ValueError("element dimensions must be positive")
        self.nx, self.ny = int(nx), int(ny)
        self.elem_w, self.elem_h = float(elem_w), float(elem_h)

        if element_mask is None:
            element_mask = np.ones((self.ny, self.nx), dtype=bool)
        element_mask = np.asarray(element_mask, dtype=bool)
        if element_mask.shape != (self.ny, self.nx):
            raise ValueError("element_mask must have shape (ny, nx)")
        if not element_mask.any():
            raise ValueError("element_mask selects no elements")
        self.element_mask = element_mask

        # elements column-major, top to bottom within a column
        cols, rows = np.nonzero(element_mask.T)
        self.elem_col = cols.astype(np.int64)
        self.elem_row = rows.astype(np.int64)
        self.n_elements = self.elem_col.size
        # element id on the grid (-1 outside the domain)
        self.elem_id_grid = -np.ones((self.ny, self.nx), dtype=np.int64)
        self.elem_id_grid[self.elem_row, self.elem_col] = np.arange(self.n_elements)

        # active grid nodes: corners of active elements
        node_active = np.zeros((self.ny + 1, self.nx + 1), dtype=bool)
        for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
            node_active[self.elem_row + dr, self.elem_col + dc] = True
        ncols, nrows = np.nonzero(node_active.T)
        self.node_col = ncols.astype(np.int64)
        self.node_row = nrows.astype(np.int64)
        self.n_nodes = self.node_col.size
        self.node_id_grid = -np.ones((self.ny + 1, self.nx + 1), dtype=np.int64)
        self.node_id_grid[self.node_row, self.node_col] = np.arange(self.n_nodes)

        self.coords = np.column_stack(
            [self.node_col * self.elem_w, (self.ny - self.node_row) * self.elem_h]
        )

        # CCW connectivity: bottom-left, bottom-right, top-right, top-left
        r, c = self.elem_row, self.elem_col
        self.connectivity = np.column_stack(
            [
                self.node_id_grid[r + 1, c],
                self.node_id_grid[r + 1, c + 1],
                self.node_id_grid[r, c + 1],
                self.node_id_grid[r, c],
            ]
        )

        # free-DOF numbering
        fixed_mask = np.zeros((self.n_nodes, 2), dtype=bool)
        for gc, gr, comp in fixed:
            nid = self.node_id_grid[int(gr), int(gc)]
            if nid < 0:
                raise ValueError(f"fixed node ({gc}, {gr}) is outside the domain")
            fixed_mask[nid, int(comp)] = True
        self.fixed_mask = fixed_mask
        self.dof_of_node = -np.ones((self.n_nodes, 2), dtype=np.int64)
        free = ~fixed_mask.ravel()
        self.dof_of_node.ravel()[free] = np.arange(free.sum())
        self.n_dofs = int(free.sum())

        # per-element free-DOF lists: global ids and kept local slots (0..7)
        all_dofs = self.dof_of_node[self.connectivity].reshape(self.n_elements, 8)
        self.elem_dofs = [row[row >= 0] for row in all_dofs]
        self.elem_local = [np.nonzero(row >= 0)[0] for row in all_dofs]
        if any(d.size == 0 for d in self.elem_dofs):
            raise ValueError("an element has all of its DOFs constrained")

    @property
    def shape(self):
        return (self.ny, self.nx)

    def node_at(self, grid_col, grid_row) -> int:
        """Node id at grid position (col, row); row 0 is the top edge."""
        nid = self.node_id_grid[int(grid_row), int(grid_col)]
        if nid < 0:
            raise ValueError(f"no active node at ({grid_col}, {grid_row})")
        return int(nid)

    def element_at(self, grid_col, grid_row) -> int:
        eid = self.elem_id_grid[int(grid_row), int(grid_col)]
        if eid < 0:
            raise ValueError(f"no active element at ({grid_col}, {grid_row})")
        return int(eid)

    def centroids(self) -> np.ndarray:
        """(N, 2) physical centroid coordinates."""
        cx = (self.elem_col + 0.5) * self.elem_w
        cy = (self.ny - self.elem_row - 0.5) * self.elem_h
        return np.column_stack([cx, cy])

    @cached_property
    def element_neighbors(self) -> list[np.ndarray]:
        """Per element: ids of face/edge/corner-adjacent active elements."""
        out = []
        for r, c in zip(self.elem_row, self.elem_col):
            block = self.elem_id_grid[
                max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2
            ].ravel()
            here = self.elem_id_grid[r, c]
            out.append(block[(block >= 0) & (block != here)])
        return out

    @cached_property
    def node_elements(self) -> list[np.ndarray]:
        """Per node: ids of active elements touching it."""
        buckets: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for e, conn in enumerate(self.connectivity):
            for n in conn:
                buckets[n].append(e)
        return [np.array(b, dtype=np.int64) for b in buckets]


class FemProblem:
    """A mesh plus material, soft-kill parameter and load vector.

    Void elements keep the fraction ``eps_k`` of their solid stiffness so
    the global matrix stays SPD for every topology.
    """

    def __init__(self, mesh: Mesh, material: Material, f: np.ndarray, eps_k: float = 1e-9):
        if not 0.0 < eps_k < 1.0:
            raise ValueError("eps_k must lie in (0, 1)")
        f = np.asarray(f, dtype=float)
        if f.shape != (mesh.n_dofs,):
            raise ValueError(f"load vector must have length G = {mesh.n_dofs}")
        if not np.any(f):
            raise ValueError("load vector must have at least one nonzero entry")
        self.mesh = mesh
        self.material = material
        self.eps_k = float(eps_k)
        self.f = f

        self._k8 = element_stiffness_q4(material, mesh.elem_w, mesh.elem_h)
        # constrained solid elemental matrices, cached per local-slot pattern
        by_mask: dict[tuple, np.ndarray] = {}
        self._ksub0 = []
        for loc in mesh.elem_local:
            key = tuple(loc)
            if key not in by_mask:
                by_mask[key] = self._k8[np.ix_(loc, loc)].copy()
            self._ksub0.append(by_mask[key])

        # COO assembly template (pattern independent of the topology)
        rows, cols, base, owner = [], [], [], []
        for e, dofs in enumerate(mesh.elem_dofs):
            g = dofs.size
            rows.append(np.repeat(dofs, g))
            cols.append(np.tile(dofs, g))
            base.append(self._ksub0[e].ravel())
            owner.append(np.full(g * g, e, dtype=np.int64))
        self._asm_rows = np.concatenate(rows)
        self._asm_cols = np.concatenate(cols)
        self._asm_base = np.concatenate(base)
        self._asm_owner = np.concatenate(owner)

        self._sqrt_cache: dict[tuple, np.ndarray] = {}

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_dofs

    def elem_solid_matrix(self, i: int) -> np.ndarray:
        """Constrained solid stiffness of element i (g_i x g_i)."""
        return self._ksub0[i]

    def elem_variation_matrix(self, i: int) -> np.ndarray:
        """Constrained switch matrix of element i: (1 - eps_k) * solid."""
        return (1.0 - self.eps_k) * self._ksub0[i]

    def elem_variation_sqrt(self, i: int) -> np.ndarray:
        """Symmetric PSD square root of the switch matrix of element i."""
        key = tuple(self.mesh.elem_local[i])
        s0 = self._sqrt_cache.get(key)
        if s0 is None:
            s0 = element_sqrt(self._ksub0[i])
            self._sqrt_cache[key] = s0
        return np.sqrt(1.0 - self.eps_k) * s0

    def assemble(self, x: np.ndarray) -> sp.csr_matrix:
        """Global stiffness for topology x (SPD, pattern independent of x)."""
        x = as_density(x, self.n_elements)
        scale = self.eps_k + (1.0 - self.eps_k) * x.astype(float)
        data = self._asm_base * scale[self._asm_owner]
        k = sp.coo_matrix(
            (data, (self._asm_rows, self._asm_cols)),
            shape=(self.n_dofs, self.n_dofs),
        ).tocsr()
        k.sum_duplicates()
        return k

    def displacements(self, x: np.ndarray) -> np.ndarray:
        from fvtopo.linalg import factorize_spd

        return factorize_spd(self.assemble(x)).solve(self.f)

    def compliance_of(self, x: np.ndarray) -> float:
        return compliance(self.displacements(x), self.f)

    def has_load_path(self, x: np.ndarray) -> bool:
        """True if every loaded node reaches a constrained node through
        solid elements (elements connect through shared nodes)."""
        x = as_density(x, self.n_elements)
        solid = x.astype(bool)
        mesh = self.mesh
        loaded_dofs = np.nonzero(self.f)[0]
        dof_node = np.full(mesh.n_dofs, -1, dtype=np.int64)
        for n in range(mesh.n_nodes):
            for comp in range(2):
                d = mesh.dof_of_node[n, comp]
                if d >= 0:
                    dof_node[d] = n
        fixed_nodes = set(np.nonzero(mesh.fixed_mask.any(axis=1))[0])
        node_elems = mesh.node_elements
        for start_node in set(dof_node[loaded_dofs]):
            seen_e: set[int] = set()
            stack = [e for e in node_elems[start_node] if solid[e]]
            found = False
            while stack:
                e = stack.pop()
                if e in seen_e:
                    continue
                seen_e.add(e)
                for n in mesh.connectivity[e]:
                    if n in fixed_nodes:
                        found = True
                        break
                    for e2 in node_elems[n]:
                        if solid[e2] and e2 not in seen_e:
                            stack.append(e2)
                if found:
                    break
            if not found:
                return False
        return True


def assemble_global(problem: FemProblem, x: np.ndarray) -> sp.csr_matrix:
    """Module-level alias for :meth:`FemProblem.assemble`."""
    return problem.assemble(x)


def compliance(u: np.ndarray, f: np.ndarray) -> float:
    """Structural compliance 0.5 * f . u."""
    u = np.asarray(u, dtype=float)
    f = np.asarray(f, dtype=float)
    if u.shape != f.shape:
        raise ValueError("u and f must have the same length")
    return 0.5 * float(f @ u)


def volume(x: np.ndarray) -> int:
    """Number of solid elements."""
    return int(np.asarray(x).sum())


def as_density(x, n: int) -> np.ndarray:
    """Validate and return a binary density vector of length n (int8)."""
    x = np.asarray(x)
    if x.shape != (n,):
        raise ValueError(f"density vector must have length {n}")
    xi = x.astype(np.int8)
    if np.any((xi != 0) & (xi != 1)) or np.any(xi != x):
        raise ValueError("density entries must be 0 or 1")
    return xi


def as_variation(y, x_base) -> np.ndarray:
    """Validate a variation vector y against its base topology."""
    y = np.asarray(y)
    x_base = np.asarray(x_base)
    if y.shape != x_base.shape:
        raise ValueError("variation vector length mismatch")
    yi = y.astype(np.int8)
    if np.any(yi != y) or np.any(np.abs(yi) > 1):
        raise ValueError("variation entries must be -1, 0 or +1")
    if np.any((yi == 1) & (x_base != 0)) or np.any((yi == -1) & (x_base != 1)):
        raise ValueError("variation adds a solid or removes a void")
    return yi


# ---------------------------------------------------------------------------
# load construction helpers


def point_load(mesh: Mesh, entries) -> np.ndarray:
    """Load vector from (node_id, comp, value) triples on free DOFs."""
    f = np.zeros(mesh.n_dofs)
    for node, comp, value in entries:
        d = mesh.dof_of_node[int(node), int(comp)]
        if d < 0:
            raise ValueError(f"DOF ({node}, {comp}) is constrained")
        f[d] += value
    return f


def add_edge_load(mesh: Mesh, f: np.ndarray, node_path, comp: int, intensity: float):
    """Lump a constant line load onto consecutive nodes of an edge path.

    Trapezoidal lumping: each segment of length L adds intensity*L/2 to
    both of its end nodes.  Contributions on constrained components are
    dropped (they are reactions).
    """
    node_path = [int(n) for n in node_path]
    if len(node_path) < 2:
        raise ValueError("edge path needs at least two nodes")
    for a, b in zip(node_path[:-1], node_path[1:]):
        seg = float(np.hypot(*(mesh.coords[b] - mesh.coords[a])))
        for n in (a, b):
            d = mesh.dof_of_node[n, int(comp)]
            if d >= 0:
                f[d] += 0.5 * intensity * seg
    return f
