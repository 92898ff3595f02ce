// Generated by scripts/gen_wavelet_taps.py from PyWavelets 1.8.0. Do not edit.

pub(crate) const HAAR_DEC_LO: [f64; 2] = [
    0.7071067811865476,
    0.7071067811865476,
];

pub(crate) const SYM4_DEC_LO: [f64; 8] = [
    -0.07576571478927333,
    -0.02963552764599851,
    0.49761866763201545,
    0.8037387518059161,
    0.29785779560527736,
    -0.09921954357684722,
    -0.012603967262037833,
    0.0322231006040427,
];

pub(crate) const SYM19_DEC_LO: [f64; 38] = [
    5.487732768215838e-07,
    -6.463651303345963e-07,
    -1.1880518269823984e-05,
    8.873312173729286e-06,
    0.0001155392333357879,
    -4.612039600210587e-05,
    -0.000635764515004334,
    0.00015915804768084938,
    0.0021214250281823303,
    -0.0011607032572062486,
    -0.005122205002583014,
    0.007968438320613306,
    0.01579743929567463,
    -0.02265199337824595,
    -0.046635983534938946,
    0.0070155738571741596,
    0.008954591173043624,
    -0.06752505804029409,
    0.10902582508127781,
    0.578144945338605,
    0.7195555257163943,
    0.2582661692372836,
    -0.17659686625203097,
    -0.11624173010739675,
    0.09363084341589714,
    0.08407267627924504,
    -0.016908234861345205,
    -0.02770989693131125,
    0.004319351874894969,
    0.008262236955528255,
    -0.0006179223277983108,
    -0.0017049602611649971,
    0.00012930767650701415,
    0.0002762187768573407,
    -1.6821387029373716e-05,
    -2.8151138661550245e-05,
    2.0623170632395688e-06,
    1.7509367995348687e-06,
];

