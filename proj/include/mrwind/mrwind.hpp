#pragma once

#include "mrwind/baselines.hpp"
#include "mrwind/data.hpp"
#include "mrwind/ddg.hpp"
#include "mrwind/error.hpp"
#include "mrwind/geo.hpp"
#include "mrwind/kernel.hpp"
#include "mrwind/linalg.hpp"
#include "mrwind/metrics.hpp"
#include "mrwind/pipeline.hpp"
#include "mrwind/quadrature.hpp"
#include "mrwind/stdr.hpp"
#include "mrwind/svgp.hpp"
#include "mrwind/synth.hpp"
