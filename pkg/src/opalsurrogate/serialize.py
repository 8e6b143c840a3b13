"""Versioned JSON serialization of posteriors and model artifacts.

A posterior stores the architecture, mask, MAP weights, hyperparameters, and
the per-layer eigenfactors of the curvature; determinant/trace bookkeeping
and masked-layer spectra are rebuilt on load.  A model artifact additionally
carries the evidence record, the standardizer, and the coordinate names so a
stored model can predict in physical units.
"""

from __future__ import annotations

import json
from typing import Any

import numpy as np

from .data import Standardizer
from .errors import ArtifactVersionError
from .evidence import EvidenceRecord, ModelRecord
from .laplace import (
    InferenceHyperParams,
    KfacFactors,
    LaplacePosterior,
    LayerKfac,
    _masked_layer_spectrum,
    log_det_and_trace,
)
from .network import Activation, ActivationKind, Architecture, Parameters, SparsityMask

__all__ = [
    "FORMAT_VERSION",
    "posterior_to_dict",
    "posterior_from_dict",
    "save_model",
    "load_model",
    "model_to_dict",
    "model_from_dict",
]

FORMAT_VERSION = 1


def _arch_to_dict(arch: Architecture) -> dict:
    return {
        "input_dim": arch.input_dim,
        "output_dim": arch.output_dim,
        "hidden_widths": list(arch.hidden_widths),
        "activations": [
            {"kind": a.kind.value, "leaky_slope": a.leaky_slope} for a in arch.activations
        ],
    }


def _arch_from_dict(d: dict) -> Architecture:
    return Architecture(
        input_dim=int(d["input_dim"]),
        output_dim=int(d["output_dim"]),
        hidden_widths=tuple(int(w) for w in d["hidden_widths"]),
        activations=tuple(
            Activation(ActivationKind(a["kind"]), float(a.get("leaky_slope", 0.01)))
            for a in d["activations"]
        ),
    )


def posterior_to_dict(post: LaplacePosterior) -> dict:
    layers = []
    for lf in post.kfac.layers:
        layers.append(
            {
                "act_evecs": lf.act_evecs.tolist(),
                "act_evals": lf.act_evals.tolist(),
                "curv_evecs": lf.curv_evecs.tolist(),
                "curv_evals": lf.curv_evals.tolist(),
            }
        )
    return {
        "version": FORMAT_VERSION,
        "arch": _arch_to_dict(post.arch),
        "mask": [m.astype(int).tolist() for m in post.mask.layers],
        "theta_map": [w.tolist() for w in post.theta_map.layers],
        "sigma": {"sigma_pr": list(post.sigma.sigma_pr), "sigma_noise": post.sigma.sigma_noise},
        "prior_mean": [w.tolist() for w in post.prior_mean.layers] if post.prior_mean else None,
        "kfac": {"layers": layers, "n_data": post.kfac.n_data},
    }


def posterior_from_dict(d: dict) -> LaplacePosterior:
    if d.get("version") != FORMAT_VERSION:
        raise ArtifactVersionError(
            f"posterior format version {d.get('version')!r} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    arch = _arch_from_dict(d["arch"])
    mask = SparsityMask(np.asarray(m, dtype=bool) for m in d["mask"])
    theta = Parameters(np.asarray(w, dtype=float) for w in d["theta_map"])
    sigma = InferenceHyperParams(
        sigma_pr=tuple(d["sigma"]["sigma_pr"]), sigma_noise=d["sigma"]["sigma_noise"]
    )
    prior_mean = (
        Parameters(np.asarray(w, dtype=float) for w in d["prior_mean"])
        if d.get("prior_mean")
        else None
    )
    layers = []
    for entry in d["kfac"]["layers"]:
        av = np.asarray(entry["act_evecs"], dtype=float)
        aw = np.asarray(entry["act_evals"], dtype=float)
        cv = np.asarray(entry["curv_evecs"], dtype=float)
        cw = np.asarray(entry["curv_evals"], dtype=float)
        layers.append(
            LayerKfac(
                act_moment=(av * aw) @ av.T,
                curv=(cv * cw) @ cv.T,
                act_evecs=av,
                act_evals=aw,
                curv_evecs=cv,
                curv_evals=cw,
            )
        )
    kfac = KfacFactors(layers=tuple(layers), n_data=int(d["kfac"]["n_data"]))
    spectra = {
        l: _masked_layer_spectrum(kfac.layers[l], mask[l], l, dense_limit=10**9)
        for l in range(arch.n_layers)
        if not mask.layer_is_full(l)
    }
    post = LaplacePosterior(
        arch=arch,
        mask=mask,
        theta_map=theta,
        sigma=sigma,
        kfac=kfac,
        log_det_h=0.0,
        trace_h_inv=0.0,
        prior_mean=prior_mean,
        masked_spectra=spectra,
    )
    post.log_det_h, post.trace_h_inv = log_det_and_trace(post)
    return post


def _evidence_to_dict(rec: EvidenceRecord) -> dict:
    return {
        "log_evid_sigma": rec.log_evid_sigma,
        "log_evid_model": rec.log_evid_model,
        "sigma_map": {"sigma_pr": list(rec.sigma_map.sigma_pr), "sigma_noise": rec.sigma_map.sigma_noise},
        "var_ln_sigma_pr2": rec.var_ln_sigma_pr2,
        "var_ln_sigma_noise2": rec.var_ln_sigma_noise2,
        "iterations": rec.iterations,
        "converged": rec.converged,
        "gamma": rec.gamma,
        "c_prior": rec.c_prior,
    }


def _evidence_from_dict(d: dict) -> EvidenceRecord:
    return EvidenceRecord(
        log_evid_sigma=float(d["log_evid_sigma"]),
        log_evid_model=float(d["log_evid_model"]),
        sigma_map=InferenceHyperParams(
            sigma_pr=tuple(d["sigma_map"]["sigma_pr"]),
            sigma_noise=d["sigma_map"]["sigma_noise"],
        ),
        var_ln_sigma_pr2=float(d["var_ln_sigma_pr2"]),
        var_ln_sigma_noise2=float(d["var_ln_sigma_noise2"]),
        iterations=int(d["iterations"]),
        converged=bool(d["converged"]),
        gamma=float(d.get("gamma", float("nan"))),
        c_prior=float(d.get("c_prior", 0.0)),
    )


def model_to_dict(
    record: ModelRecord,
    standardizer: Standardizer | None = None,
    input_names: tuple[str, ...] = (),
    output_names: tuple[str, ...] = (),
) -> dict:
    return {
        "version": FORMAT_VERSION,
        "label": record.label,
        "plausibility": record.plausibility,
        "posterior": posterior_to_dict(record.posterior),
        "evidence": _evidence_to_dict(record.evidence),
        "standardizer": {
            "input_shift": standardizer.input_shift.tolist(),
            "input_scale": standardizer.input_scale.tolist(),
            "output_shift": standardizer.output_shift.tolist(),
            "output_scale": standardizer.output_scale.tolist(),
        }
        if standardizer is not None
        else None,
        "input_names": list(input_names),
        "output_names": list(output_names),
    }


def model_from_dict(d: dict) -> tuple[ModelRecord, Standardizer | None, dict[str, Any]]:
    if d.get("version") != FORMAT_VERSION:
        raise ArtifactVersionError(
            f"model artifact version {d.get('version')!r} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    post = posterior_from_dict(d["posterior"])
    record = ModelRecord(
        arch=post.arch,
        mask=post.mask,
        posterior=post,
        evidence=_evidence_from_dict(d["evidence"]),
        plausibility=d.get("plausibility"),
        label=d.get("label", ""),
    )
    std = None
    if d.get("standardizer"):
        s = d["standardizer"]
        std = Standardizer(
            input_shift=np.asarray(s["input_shift"], dtype=float),
            input_scale=np.asarray(s["input_scale"], dtype=float),
            output_shift=np.asarray(s["output_shift"], dtype=float),
            output_scale=np.asarray(s["output_scale"], dtype=float),
        )
    meta = {
        "input_names": tuple(d.get("input_names", ())),
        "output_names": tuple(d.get("output_names", ())),
    }
    return record, std, meta


def save_model(
    path,
    record: ModelRecord,
    standardizer: Standardizer | None = None,
    input_names: tuple[str, ...] = (),
    output_names: tuple[str, ...] = (),
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            model_to_dict(record, standardizer, input_names, output_names),
            fh,
            indent=1,
            sort_keys=True,
        )


def load_model(path) -> tuple[ModelRecord, Standardizer | None, dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
