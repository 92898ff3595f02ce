"""Regenerate the embedded wavelet decomposition lowpass taps.

Writes crates/core/src/wavelet/taps.rs from PyWavelets' filter banks.
Only `dec_lo` is embedded; the highpass and reconstruction filters are
derived in Rust from the quadrature-mirror relation.

    pip install PyWavelets
    python crates/core/scripts/gen_wavelet_taps.py > crates/core/src/wavelet/taps.rs
"""

import pywt

NAMES = [("HAAR", "haar"), ("SYM4", "sym4"), ("SYM19", "sym19")]

print("// Generated by scripts/gen_wavelet_taps.py from PyWavelets %s. Do not edit." % pywt.__version__)
print()
for const, name in NAMES:
    taps = pywt.Wavelet(name).dec_lo
    print("pub(crate) const %s_DEC_LO: [f64; %d] = [" % (const, len(taps)))
    for t in taps:
        print("    %r," % t)
    print("];")
    print()
