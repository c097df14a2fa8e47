#pragma once

#include "gapbridge/emb_io.hpp"
#include "gapbridge/errors.hpp"
#include "gapbridge/evalmetrics.hpp"
#include "gapbridge/gapmap.hpp"
#include "gapbridge/gauss.hpp"
#include "gapbridge/prompt.hpp"
#include "gapbridge/revmap.hpp"
#include "gapbridge/rng.hpp"
#include "gapbridge/synth.hpp"
#include "gapbridge/trainer.hpp"
