"""Independent true values for the two simulation designs.

Writes true_values.json next to this file. Both readings of the noise and
spread parameters are emitted: the second argument of each Normal taken as
a standard deviation and as a variance.
"""

import json
import math
from pathlib import Path

from scipy import integrate, stats


def expit(x):
    return 1.0 / (1.0 + math.exp(-x))


def ate_truth(noise_sd):
    beta = stats.beta(0.85, 0.85)

    def over_w(f):
        # W1 = 4Z - 2 with Z ~ Beta(.85, .85); W2 ~ Bernoulli(.5).
        total = 0.0
        for w2 in (0.0, 1.0):
            val, _ = integrate.quad(lambda z: f(4 * z - 2, w2) * beta.pdf(z), 0, 1, limit=200, epsabs=1e-13, epsrel=1e-12)
            total += 0.5 * val
        return total

    qbar = lambda w1, w2: expit(w1 - 2 * w1 * w2)
    psi0 = over_w(qbar)
    second = over_w(lambda w1, w2: qbar(w1, w2) ** 2)
    inv_g = over_w(lambda w1, w2: 1.0 / qbar(w1, w2))
    return {
        "noise_sd": noise_sd,
        "psi0": psi0,
        "efficiency_bound": noise_sd**2 * inv_g + second - psi0**2,
        "e_inverse_g": inv_g,
        "var_qbar": second - psi0**2,
    }


def density_truth(sd):
    p = stats.norm(-4.0, sd).pdf
    lo, hi = -4.0 - 40 * sd, -4.0 + 40 * sd
    psi0, _ = integrate.quad(lambda o: p(o) ** 2, lo, hi, points=[-4.0], limit=400, epsabs=1e-14)
    cube, _ = integrate.quad(lambda o: p(o) ** 3, lo, hi, points=[-4.0], limit=400, epsabs=1e-14)
    return {
        "sd": sd,
        "psi0": psi0,
        "psi0_closed_form": 1.0 / (2.0 * sd * math.sqrt(math.pi)),
        "int_p_cubed": cube,
        "efficiency_bound": 4.0 * (cube - psi0**2),
    }


def main():
    out = {
        "ate": {
            "sd_reading": ate_truth(0.25),
            "variance_reading": ate_truth(0.5),
        },
        "density": {
            "sd_reading": density_truth(5.0 / 3.0),
            "variance_reading": density_truth(math.sqrt(5.0 / 3.0)),
        },
    }
    path = Path(__file__).with_name("true_values.json")
    path.write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
