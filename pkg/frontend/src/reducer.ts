/**
 * Pure fold from the session event stream to the two view models.
 *
 * The view is a function of the log and nothing else: replaying a finished
 * session produces exactly the screen a live subscriber saw, any prefix is a
 * valid intermediate state, unknown event kinds are ignored for forward
 * compatibility, and malformed events become error rows instead of throwing.
 */

import type {
  EventRecord,
  GalleryViewModel,
  TraceStep,
  TraceViewModel,
  ViewModels,
} from "./types.js";

export interface ReducerState {
  trace: TraceViewModel;
  gallery: GalleryViewModel;
  thoughts: Map<number, string>;
  byStep: Map<number, TraceStep>;
  lastThought: string | null;
  bestImage: string | null;
}

const bare = (ref: unknown): string =>
  typeof ref === "string" ? ref.replace(/^@/, "") : "";

export function createState(): ReducerState {
  return {
    trace: {
      steps: [],
      outcome: "running",
      finalThought: null,
      finalText: null,
      finalArtifacts: [],
      aborted: false,
    },
    gallery: { factual: null, candidates: [], differenceMap: null },
    thoughts: new Map(),
    byStep: new Map(),
    lastThought: null,
    bestImage: null,
  };
}

export function applyEvent(state: ReducerState, event: EventRecord): ReducerState {
  try {
    applyChecked(state, event);
  } catch (err) {
    state.trace.steps.push({
      step: state.trace.steps.length,
      thought: "",
      tool: "?",
      actionText: "",
      status: "error",
      resultSummary: `malformed event seq=${event?.seq}: ${String(err)}`,
    });
  }
  return state;
}

function applyChecked(state: ReducerState, event: EventRecord): void {
  const body = event.body;
  switch (event.kind) {
    case "query_received": {
      if (body.image) state.gallery.factual = bare(body.image);
      break;
    }
    case "thought": {
      state.thoughts.set(body.step, body.text);
      state.lastThought = body.text;
      break;
    }
    case "tool_call": {
      const step: TraceStep = {
        step: body.step,
        thought: state.thoughts.get(body.step) ?? "",
        tool: body.tool,
        actionText: body.action,
        status: body.awaiting_approval ? "awaiting_approval" : "pending",
        resultSummary: "",
      };
      state.trace.steps.push(step);
      state.byStep.set(body.step, step);
      break;
    }
    case "control": {
      if (body.command === "approve") {
        const waiting = state.trace.steps.find((s) => s.status === "awaiting_approval");
        if (waiting) waiting.status = "pending";
      }
      break;
    }
    case "tool_result": {
      const step = state.byStep.get(body.step);
      if (!step) throw new Error(`tool_result for unknown step ${body.step}`);
      if (body.ok) {
        step.status = "ok";
        step.resultSummary = "ok";
        if (body.tool === "cf_workflow" && body.payload) {
          state.bestImage = bare(body.payload.best?.image);
          state.gallery.differenceMap = bare(body.payload.difference_map) || null;
          markSelected(state);
        }
      } else {
        step.status = "error";
        step.resultSummary = `error ${body.error?.code ?? "?"}`;
      }
      break;
    }
    case "candidate_scored": {
      state.gallery.factual = bare(body.factual);
      state.gallery.candidates.push({
        index: body.index,
        editor: body.config.editor,
        image: bare(body.image),
        cpg: body.metrics.cpg,
        flipped: body.metrics.flipped,
        ssim: body.metrics.ssim,
        sip: body.metrics.sip,
        score: body.score,
        selected: false,
      });
      markSelected(state);
      break;
    }
    case "final_answer": {
      state.trace.outcome = "final";
      state.trace.finalText = body.text;
      state.trace.finalThought = state.lastThought;
      state.trace.finalArtifacts = (body.artifacts ?? []).map(bare);
      break;
    }
    case "timeout": {
      state.trace.outcome = "timeout";
      state.trace.aborted = Boolean(body.aborted);
      break;
    }
    default:
      break; // session_created and future kinds: ignored
  }
}

function markSelected(state: ReducerState): void {
  if (state.bestImage === null) return;
  for (const candidate of state.gallery.candidates) {
    candidate.selected = candidate.image === state.bestImage;
  }
}

/** Strip the fold's bookkeeping down to the plain view models. */
export function viewModels(state: ReducerState): ViewModels {
  return { trace: state.trace, gallery: state.gallery };
}

export function reduceEvents(events: EventRecord[]): ViewModels {
  const state = createState();
  for (const event of events) applyEvent(state, event);
  return viewModels(state);
}

export function parseEventLine(line: string): EventRecord {
  return JSON.parse(line) as EventRecord;
}
