#pragma once

#include "semifa/errors.hpp"
#include "semifa/numerics.hpp"
#include "semifa/measurement.hpp"
#include "semifa/latent.hpp"
#include "semifa/dataset.hpp"
#include "semifa/likelihood.hpp"
#include "semifa/estimation.hpp"
#include "semifa/selection.hpp"
#include "semifa/inference.hpp"
#include "semifa/scoring.hpp"
#include "semifa/simulate.hpp"
#include "semifa/preprocess.hpp"
#include "semifa/io.hpp"
#include "semifa/analysis.hpp"
