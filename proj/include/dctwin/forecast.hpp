#pragma once

#include "dctwin/forecast/dataset.hpp"
#include "dctwin/forecast/forecaster.hpp"
#include "dctwin/forecast/linreg.hpp"
#include "dctwin/forecast/lstm.hpp"
#include "dctwin/forecast/experiment.hpp"
