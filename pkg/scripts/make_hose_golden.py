"""Evaluate the closed-form hose constants in 50-digit arithmetic and freeze them.

Independent of the package: Lame parameters and the constants are computed
here from the engineering data with mpmath.

    python scripts/make_hose_golden.py [tests/fixtures/hose_golden.json]
"""
import json
import sys
from pathlib import Path

import mpmath as mp

mp.mp.dps = 50

E_S, NU_S = mp.mpf("200e9"), mp.mpf("0.285")
E_R = mp.mpf("0.01e9")
R_IN, R_MID, R_OUT = mp.mpf("0.5"), mp.mpf("0.99"), mp.mpf("1.0")
P_IN, P_OUT = mp.mpf("1e6"), mp.mpf("0")


def constants(p_in, p_out):
    mu_R = E_R / 3  # nu = 1/2
    mu_S = E_S / (2 * (1 + NU_S))
    l_S = E_S * NU_S / ((1 + NU_S) * (1 - 2 * NU_S))
    Ri, Rm, Ro = R_IN ** 2, R_MID ** 2, R_OUT ** 2
    d = ((mu_R - mu_S) * (l_S + mu_S) * Ro + mu_S * (l_S + mu_R + mu_S) * Rm) * Ri \
        - mu_R * (mu_S * Rm + (l_S + mu_S) * Ro) * Rm
    A = (-p_in * (mu_S * Rm + (l_S + mu_S) * Ro) + p_out * (l_S + 2 * mu_S) * Ro) * Rm * Ri / (2 * d)
    B = (-p_in * mu_S * Ri * Rm - p_out * ((mu_R - mu_S) * Ri - mu_R * Rm) * Ro) / (2 * d)
    C = (-p_in * (l_S + mu_S) * Ri + p_out * ((l_S + mu_R + mu_S) * Ri - mu_R * Rm)) * Rm * Ro / (2 * d)
    p0 = (p_in * ((mu_R - mu_S) * (l_S + mu_S) * Ro + mu_S * (l_S + mu_R + mu_S) * Rm) * Ri
          - p_out * mu_R * (l_S + 2 * mu_S) * Ro * Rm) / d
    return {"A": A, "B": B, "C": C, "p0": p0, "d": d}


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "tests/fixtures/hose_golden.json"
    cases = []
    for p_in, p_out in ((P_IN, P_OUT), (P_IN, mp.mpf("0.3e6")), (mp.mpf("0"), mp.mpf("1e6"))):
        k = constants(p_in, p_out)
        cases.append({"p_in": float(p_in), "p_out": float(p_out),
                      **{name: mp.nstr(v, 30) for name, v in k.items()}})
    data = {"E_S": float(E_S), "nu_S": float(NU_S), "E_R": float(E_R), "nu_R": 0.5,
            "R_in": float(R_IN), "R_mid": float(R_MID), "R_out": float(R_OUT), "cases": cases}
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(data, indent=2) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
